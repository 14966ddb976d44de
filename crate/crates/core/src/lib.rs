//! Multi-head co-training for semi-supervised image classification.
//!
//! A shared trunk feeds several structurally identical classification heads.
//! Each head learns from pseudo-labels on which a strict majority of the other
//! heads agree (predicted on weakly augmented images), applied to its own
//! strongly augmented view. Evaluation uses an exponential moving average of
//! the weights and averages the heads' class probabilities.

pub mod augment;
pub mod calibration;
pub mod checkpoint;
pub mod config;
pub mod cotrain;
pub mod data;
pub mod error;
pub mod math;
pub mod model;
pub mod nn;

pub use augment::AugmentProfile;
pub use checkpoint::Checkpoint;
pub use config::{AblationVariant, DatasetConfig, TrainConfig};
pub use cotrain::{PseudoLabelDecision, TrainState};
pub use data::{ChannelStats, DatasetSplit, Image, LabeledExample};
pub use error::{Error, Result};
pub use model::{Logits, ModelConfig, MultiHeadModel};
