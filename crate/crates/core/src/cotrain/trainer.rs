use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{strong_augment, weak_augment};
use crate::checkpoint::Checkpoint;
use crate::config::{AblationVariant, TrainConfig};
use crate::data::{split_labels, BatchIterator, ChannelStats, DatasetSplit, Image, LabeledBatch, LabeledExample, UnlabeledBatch};
use crate::error::{Error, Result};
use crate::model::{ensemble_classes, images_to_batch, infer, predict_classes, Logits, MultiHeadModel};
use crate::nn::{FeatureMap, Mode};

use super::ema::ema_update_model;
use super::loss::{supervised_loss, total_loss, unsupervised_loss};
use super::optim::{cosine_lr, SgdNesterov};
use super::pseudo::{select_pseudo_labels, PseudoLabelDecision};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.json";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.json";
pub const DIVERGED_CHECKPOINT: &str = "checkpoint_diverged.json";

const DATA_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.random()
}

/// Trainer weights, moving-average shadow, optimizer buffers and the
/// augmentation stream.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: MultiHeadModel,
    pub ema: MultiHeadModel,
    pub optimizer: SgdNesterov,
    pub iteration: u64,
    pub augment_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let mut model = MultiHeadModel::build(&config.model_config()?, config.seed)?;
        let optimizer = SgdNesterov::new(&mut model, config.momentum, config.weight_decay);
        Ok(Self {
            ema: model.clone(),
            model,
            optimizer,
            iteration: 0,
            augment_rng: ChaCha8Rng::seed_from_u64(stream_seed(config.seed, AUGMENT_STREAM)),
        })
    }

    /// The model whose error is reported: the shadow, or the trainer under `no-ema`.
    pub fn reported_model(&mut self, variant: AblationVariant) -> &mut MultiHeadModel {
        if variant == AblationVariant::NoEma {
            &mut self.model
        } else {
            &mut self.ema
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub iteration: u64,
    pub lr: f64,
    pub loss_l: f64,
    pub loss_u: f64,
    pub loss: f64,
    pub selected_frac: Vec<f64>,
    /// Per head, accuracy of selected pseudo-labels; `None` when nothing was selected.
    pub pseudo_acc: Option<Vec<Option<f64>>>,
}

/// One optimisation step on a labeled and an unlabeled batch.
///
/// All views go through the trunk as one train-mode batch laid out as
/// `[labeled weak | pseudo-labelling view | strong view 0 | strong view 1 | ...]`.
/// Head `m` sees the first two blocks plus its own strong view. Pseudo-labels
/// are read from the second block and receive no gradient.
///
/// `truth` holds the hidden labels of the unlabeled batch and is used only for
/// the pseudo-label accuracy diagnostic.
pub fn train_step(
    state: &mut TrainState,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    config: &TrainConfig,
    stats: &ChannelStats,
    truth: Option<&[usize]>,
) -> Result<StepMetrics> {
    let variant = config.ablation_variant;
    let heads = state.model.num_heads();
    let (bl, bu) = (labeled.examples.len(), unlabeled.images.len());
    if bl == 0 {
        return Err(Error::contract("empty labeled batch"));
    }
    let lr = cosine_lr(config.learning_rate, state.iteration, config.total_iterations)?;
    let profile = &config.augment;
    let rng = &mut state.augment_rng;

    let mut views: Vec<Image> = Vec::with_capacity(bl + bu * (heads + 1));
    views.extend(labeled.examples.iter().map(|e| weak_augment(&e.image, profile, rng)));
    if variant == AblationVariant::NoWeak {
        views.extend(unlabeled.images.iter().cloned());
    } else {
        views.extend(unlabeled.images.iter().map(|u| weak_augment(u, profile, rng)));
    }
    let strong_views = if variant == AblationVariant::OneStrong { 1 } else { heads };
    if bu > 0 {
        for _ in 0..strong_views {
            views.extend(unlabeled.images.iter().map(|u| strong_augment(u, profile, rng)));
        }
    }

    let layout = BatchLayout {
        labeled: bl,
        unlabeled: bu,
        strong_views,
    };
    let batch = images_to_batch(&views, stats)?;
    let labels: Vec<usize> = labeled.examples.iter().map(|e| e.label).collect();
    state.model.zero_grad();
    let losses = match co_training_losses(
        &mut state.model,
        &batch,
        layout,
        &labels,
        config.lambda_u,
        config.confidence_threshold,
        None,
        true,
    ) {
        Err(Error::Diverged { reason, .. }) => {
            return Err(Error::Diverged {
                iteration: state.iteration,
                reason,
            })
        }
        other => other?,
    };
    let (selected_frac, pseudo_acc) = match &losses.decision {
        Some(decision) => {
            let pseudo_acc = truth.map(|truth| {
                (0..heads)
                    .map(|m| {
                        let chosen: Vec<usize> = (0..bu).filter(|&b| decision.selected[b][m]).collect();
                        (!chosen.is_empty()).then(|| {
                            let hits = chosen
                                .iter()
                                .filter(|&&b| decision.pseudo_class[b][m] == truth[b])
                                .count();
                            hits as f64 / chosen.len() as f64
                        })
                    })
                    .collect()
            });
            (decision.selected_fraction(), pseudo_acc)
        }
        None => (vec![0.0; heads], None),
    };
    state.optimizer.step(&mut state.model, lr);
    if variant != AblationVariant::NoEma {
        ema_update_model(&mut state.ema, &state.model, config.ema_decay)?;
    }
    let iteration = state.iteration;
    state.iteration += 1;
    Ok(StepMetrics {
        iteration,
        lr,
        loss_l: losses.loss_l,
        loss_u: losses.loss_u,
        loss: losses.loss,
        selected_frac,
        pseudo_acc,
    })
}

/// Row blocks of the combined trunk batch:
/// `[labeled | pseudo-labelling view | strong view 0 | ... | strong view V-1]`,
/// each unlabeled block holding `unlabeled` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchLayout {
    pub labeled: usize,
    pub unlabeled: usize,
    /// One per head, or a single view shared by every head.
    pub strong_views: usize,
}

impl BatchLayout {
    pub fn rows(&self) -> usize {
        self.labeled + self.unlabeled * (1 + self.strong_views)
    }

    fn strong_rows(&self, m: usize) -> Range<usize> {
        let v = if self.strong_views == 1 { 0 } else { m };
        let start = self.labeled + self.unlabeled * (1 + v);
        start..start + self.unlabeled
    }

    /// Rows seen by head `m`.
    pub fn routes(&self, heads: usize) -> Vec<Vec<Range<usize>>> {
        (0..heads)
            .map(|m| {
                if self.unlabeled > 0 {
                    vec![0..self.labeled + self.unlabeled, self.strong_rows(m)]
                } else {
                    vec![0..self.labeled]
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub loss_l: f64,
    pub loss_u: f64,
    pub loss: f64,
    /// `None` when the layout has no unlabeled rows.
    pub decision: Option<PseudoLabelDecision>,
}

/// Train-mode forward of a prepared batch and the total loss
/// `L_l + λ·L_u`. Pseudo-labels come from `decision` when given, otherwise
/// from the pseudo-labelling block. With `backward` set, gradients are
/// accumulated into the model's parameters.
#[allow(clippy::too_many_arguments)]
pub fn co_training_losses(
    model: &mut MultiHeadModel,
    batch: &FeatureMap,
    layout: BatchLayout,
    labels: &[usize],
    lambda_u: f64,
    threshold: f64,
    decision: Option<&PseudoLabelDecision>,
    backward: bool,
) -> Result<LossBreakdown> {
    let (bl, bu) = (layout.labeled, layout.unlabeled);
    if batch.batch != layout.rows() || labels.len() != bl {
        return Err(Error::contract("batch does not match its layout"));
    }
    if layout.strong_views != 1 && layout.strong_views != model.num_heads() {
        return Err(Error::contract("strong views must be one shared or one per head"));
    }
    let heads = model.num_heads();
    let classes = model.num_classes();
    let out = model.forward_routed(batch, &layout.routes(heads), Mode::Train)?;
    let block = |from: usize, len: usize| -> Logits {
        let per_head: Vec<Vec<f64>> = out
            .iter()
            .map(|rows| rows[from * classes..(from + len) * classes].to_vec())
            .collect();
        Logits::from_heads(&per_head, len, classes)
    };
    let sup = supervised_loss(&block(0, bl), labels)?;
    let mut grads: Vec<Vec<f64>> = (0..heads).map(|m| sup.grad.head_rows(m)).collect();
    let (loss_u, decision) = if bu > 0 {
        let decision = match decision {
            Some(d) => d.clone(),
            None => select_pseudo_labels(&block(bl, bu), threshold)?,
        };
        let unsup = unsupervised_loss(&block(bl + bu, bu), &decision)?;
        for (m, g) in grads.iter_mut().enumerate() {
            g.resize((bl + bu) * classes, 0.0);
            g.extend(unsup.grad.head_rows(m).iter().map(|v| lambda_u * v));
        }
        (unsup.value, Some(decision))
    } else {
        (0.0, None)
    };
    let loss = total_loss(sup.value, loss_u, lambda_u);
    if !loss.is_finite() {
        return Err(Error::Diverged {
            iteration: 0,
            reason: format!("non-finite total loss {loss}"),
        });
    }
    if backward {
        model.backward_routed(&grads)?;
    }
    Ok(LossBreakdown {
        loss_l: sup.value,
        loss_u,
        loss,
        decision,
    })
}

/// Test error in percent, per head and for the probability-mean ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub head_errors: Vec<f64>,
    pub ensemble_error: f64,
}

impl EvalResult {
    pub fn mean_head_error(&self) -> f64 {
        self.head_errors.iter().sum::<f64>() / self.head_errors.len() as f64
    }
}

pub fn evaluate(model: &mut MultiHeadModel, test: &[LabeledExample], stats: &ChannelStats) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::config("empty evaluation set"));
    }
    let images: Vec<&Image> = test.iter().map(|e| &e.image).collect();
    let logits = infer(model, &images, stats)?;
    let n = test.len() as f64;
    let error = |predicted: &mut dyn Iterator<Item = usize>| -> f64 {
        let wrong = predicted.zip(test).filter(|(p, e)| *p != e.label).count();
        100.0 * wrong as f64 / n
    };
    let per_example = predict_classes(&logits);
    let head_errors = (0..logits.heads)
        .map(|m| error(&mut per_example.iter().map(|row| row[m])))
        .collect();
    let ensemble_error = error(&mut ensemble_classes(&logits).into_iter());
    Ok(EvalResult {
        head_errors,
        ensemble_error,
    })
}

/// One line of the metrics log. Losses and selection are averages over the
/// steps since the previous record and are `null` for the initial record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub lr: f64,
    pub loss_l: Option<f64>,
    pub loss_u: Option<f64>,
    pub selected_frac: Option<Vec<f64>>,
    /// Ensemble error of the trainer weights.
    pub test_error: f64,
    /// Ensemble error of the moving-average weights; `null` under `no-ema`.
    pub ema_test_error: Option<f64>,
    /// Per-head error of the reported model.
    pub head_errors: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_acc: Option<Vec<Option<f64>>>,
}

impl MetricsRecord {
    /// Ensemble error of the model the run reports.
    pub fn reported_error(&self) -> f64 {
        self.ema_test_error.unwrap_or(self.test_error)
    }
}

#[derive(Default)]
struct Window {
    steps: usize,
    loss_l: f64,
    loss_u: f64,
    selected: Vec<f64>,
    acc_sum: Vec<f64>,
    acc_n: Vec<usize>,
}

impl Window {
    fn add(&mut self, s: &StepMetrics) {
        let heads = s.selected_frac.len();
        if self.steps == 0 {
            *self = Window {
                selected: vec![0.0; heads],
                acc_sum: vec![0.0; heads],
                acc_n: vec![0; heads],
                ..Window::default()
            };
        }
        self.steps += 1;
        self.loss_l += s.loss_l;
        self.loss_u += s.loss_u;
        for (a, b) in self.selected.iter_mut().zip(&s.selected_frac) {
            *a += b;
        }
        for (m, acc) in s.pseudo_acc.iter().flatten().enumerate() {
            if let Some(acc) = acc {
                self.acc_sum[m] += acc;
                self.acc_n[m] += 1;
            }
        }
    }

    fn take(&mut self, log_pseudo_acc: bool) -> (Option<f64>, Option<f64>, Option<Vec<f64>>, Option<Vec<Option<f64>>>) {
        if self.steps == 0 {
            return (None, None, None, None);
        }
        let n = self.steps as f64;
        let acc = log_pseudo_acc.then(|| {
            self.acc_sum
                .iter()
                .zip(&self.acc_n)
                .map(|(s, &k)| (k > 0).then(|| s / k as f64))
                .collect()
        });
        let out = (
            Some(self.loss_l / n),
            Some(self.loss_u / n),
            Some(self.selected.iter().map(|s| s / n).collect()),
            acc,
        );
        self.steps = 0;
        out
    }
}

/// Result of a full training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<MetricsRecord>,
    pub normalization: ChannelStats,
    /// Iteration of the record with the lowest reported error.
    pub best_iteration: u64,
}

impl TrainOutcome {
    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("the initial evaluation is always recorded")
    }
}

/// Splits `train` into labeled and unlabeled pools and runs the configured
/// number of steps, evaluating on `test` at iteration 0, every
/// `eval_interval` steps and at the end.
///
/// With `out_dir` set, streams `metrics.jsonl` and writes the final and best
/// checkpoints there; on divergence the current state is dumped before the
/// error is returned.
pub fn train(
    config: &TrainConfig,
    train: &[LabeledExample],
    test: &[LabeledExample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let split = split_labels(train, config.dataset.num_classes(), config.n_labeled, config.seed)?;
    train_on_split(config, &split, test, out_dir)
}

pub fn train_on_split(
    config: &TrainConfig,
    split: &DatasetSplit,
    test: &[LabeledExample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let stats = split.normalization.clone();
    let mut state = TrainState::new(config)?;
    let batch_unlabeled = if split.unlabeled.is_empty() { 0 } else { config.batch_unlabeled };
    let mut batches = BatchIterator::new(
        split,
        config.batch_labeled,
        batch_unlabeled,
        stream_seed(config.seed, DATA_STREAM),
    )?;
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let checkpoint = |state: &TrainState, name: &str| -> Result<()> {
        match out_dir {
            Some(dir) => Checkpoint::capture(config, state, &stats).save(&dir.join(name)),
            None => Ok(()),
        }
    };

    let mut records = Vec::new();
    let mut window = Window::default();
    let mut best: Option<(f64, u64)> = None;
    loop {
        let t = state.iteration;
        if t == 0 || t % config.eval_interval == 0 || t == config.total_iterations {
            let (loss_l, loss_u, selected_frac, pseudo_acc) = window.take(config.log_pseudo_acc);
            let trainer = evaluate(&mut state.model, test, &stats)?;
            let ema = (config.ablation_variant != AblationVariant::NoEma)
                .then(|| evaluate(&mut state.ema, test, &stats))
                .transpose()?;
            let record = MetricsRecord {
                iteration: t,
                lr: cosine_lr(config.learning_rate, t, config.total_iterations)?,
                loss_l,
                loss_u,
                selected_frac,
                test_error: trainer.ensemble_error,
                ema_test_error: ema.as_ref().map(|e| e.ensemble_error),
                head_errors: ema.unwrap_or(trainer).head_errors,
                pseudo_acc,
            };
            if let Some((w, path)) = &mut log {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n")
                    .and_then(|_| w.flush())
                    .map_err(|e| Error::io(path.clone(), e))?;
            }
            if best.is_none_or(|(err, _)| record.reported_error() < err) {
                best = Some((record.reported_error(), t));
                checkpoint(&state, BEST_CHECKPOINT)?;
            }
            records.push(record);
        }
        if state.iteration >= config.total_iterations {
            break;
        }
        let (labeled, unlabeled) = batches.next().expect("batch stream is endless");
        let truth: Option<Vec<usize>> = config.log_pseudo_acc.then(|| {
            unlabeled
                .pool_indices
                .iter()
                .map(|&i| split.unlabeled_ground_truth(i))
                .collect()
        });
        match train_step(&mut state, &labeled, &unlabeled, config, &stats, truth.as_deref()) {
            Ok(step) => window.add(&step),
            Err(e @ Error::Diverged { .. }) => {
                checkpoint(&state, DIVERGED_CHECKPOINT)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
    checkpoint(&state, FINAL_CHECKPOINT)?;
    Ok(TrainOutcome {
        state,
        records,
        normalization: stats,
        best_iteration: best.map_or(0, |(_, t)| t),
    })
}
