//! The co-training algorithm: pseudo-labelling, losses, optimisation and the
//! training loop.

pub mod ema;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod pseudo;
pub mod trainer;

pub use ema::{ema_update, ema_update_model};
pub use gradcheck::{check_gradients, GradientCheck};
pub use loss::{supervised_loss, total_loss, unsupervised_loss, LossWithGrad};
pub use optim::{cosine_lr, sgd_nesterov_step, SgdNesterov};
pub use pseudo::{peer_pseudo_labels, select_pseudo_labels, threshold_pseudo_labels, PseudoLabelDecision};
pub use trainer::{
    co_training_losses, evaluate, train, train_on_split, train_step, BatchLayout, EvalResult, LossBreakdown,
    MetricsRecord, StepMetrics, TrainOutcome, TrainState,
};
