//! Shared-trunk, multi-head classifier.
//!
//! The backbone is cut into a trunk and a head at a block-group boundary
//! (`split_point`). The trunk runs once per image; every head owns an
//! independent copy of the remaining groups plus pooling and the classifier.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ChannelStats, Image};
use crate::error::{Error, Result};
use crate::math::{argmax, softmax};
use crate::nn::{
    BatchNorm2d, Conv2d, FeatureMap, GlobalAvgPool, Layer, Linear, MaxPool2, Mode, Param, Relu,
    Sequential, StateVisitor, StateVisitorMut, WideBlock,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backbone {
    /// Wide ResNet, depth 28 (three groups of four pre-activation blocks).
    #[serde(rename = "wrn-28")]
    Wrn28,
    /// Three conv-BN-ReLU blocks (the first two max-pooled); desk-scale backbone.
    #[serde(rename = "small-cnn")]
    SmallCnn,
}

/// Number of block groups both backbones are divided into.
pub const NUM_GROUPS: usize = 3;

fn default_split() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_heads: usize,
    pub num_classes: usize,
    pub backbone: Backbone,
    pub width_factor: usize,
    /// Index of the first block group that belongs to the heads.
    #[serde(default = "default_split")]
    pub split_point: usize,
    /// Channel override for block groups inside the heads.
    #[serde(default)]
    pub head_channels: Option<usize>,
    #[serde(default)]
    pub same_head_init: bool,
}

impl ModelConfig {
    pub fn wrn28(width_factor: usize, num_heads: usize, num_classes: usize) -> Self {
        Self {
            num_heads,
            num_classes,
            backbone: Backbone::Wrn28,
            width_factor,
            split_point: default_split(),
            head_channels: None,
            same_head_init: false,
        }
    }

    pub fn small_cnn(width_factor: usize, num_heads: usize, num_classes: usize) -> Self {
        Self {
            backbone: Backbone::SmallCnn,
            ..Self::wrn28(width_factor, num_heads, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 {
            return Err(Error::config("num_heads must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.width_factor == 0 {
            return Err(Error::config("width_factor must be positive"));
        }
        if self.split_point > NUM_GROUPS {
            return Err(Error::config(format!(
                "split_point {} exceeds the {NUM_GROUPS} block groups of the backbone",
                self.split_point
            )));
        }
        if self.head_channels == Some(0) {
            return Err(Error::config("head_channels must be positive"));
        }
        Ok(())
    }

    fn group_channels(&self) -> [usize; NUM_GROUPS] {
        let k = self.width_factor;
        let mut ch = match self.backbone {
            Backbone::Wrn28 => [16 * k, 32 * k, 64 * k],
            Backbone::SmallCnn => [4 * k, 4 * k, 8 * k],
        };
        if let Some(hc) = self.head_channels {
            for c in ch.iter_mut().skip(self.split_point) {
                *c = hc;
            }
        }
        ch
    }
}

const WRN_BLOCKS_PER_GROUP: usize = 4;
const WRN_STEM_CHANNELS: usize = 16;

fn build_group(config: &ModelConfig, group: usize, in_ch: usize, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let out_ch = config.group_channels()[group];
    match config.backbone {
        Backbone::Wrn28 => {
            let stride = if group == 0 { 1 } else { 2 };
            (0..WRN_BLOCKS_PER_GROUP)
                .map(|b| {
                    let (cin, s) = if b == 0 { (in_ch, stride) } else { (out_ch, 1) };
                    Layer::Wide(WideBlock::new(cin, out_ch, s, rng))
                })
                .collect()
        }
        Backbone::SmallCnn => {
            let mut layers = vec![
                Layer::Conv(Conv2d::new(in_ch, out_ch, 3, 1, 1, rng)),
                Layer::Norm(BatchNorm2d::new(out_ch)),
                Layer::Relu(Relu::default()),
            ];
            if group + 1 < NUM_GROUPS {
                layers.push(Layer::MaxPool(MaxPool2::default()));
            }
            layers
        }
    }
}

fn group_input_channels(config: &ModelConfig, group: usize) -> usize {
    if group == 0 {
        match config.backbone {
            Backbone::Wrn28 => WRN_STEM_CHANNELS,
            Backbone::SmallCnn => Image::CHANNELS,
        }
    } else {
        config.group_channels()[group - 1]
    }
}

fn build_trunk(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Sequential {
    let mut layers = Vec::new();
    if config.backbone == Backbone::Wrn28 {
        layers.push(Layer::Conv(Conv2d::new(Image::CHANNELS, WRN_STEM_CHANNELS, 3, 1, 1, rng)));
    }
    for g in 0..config.split_point {
        layers.extend(build_group(config, g, group_input_channels(config, g), rng));
    }
    Sequential::new(layers)
}

fn build_head(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Sequential {
    let mut layers = Vec::new();
    for g in config.split_point..NUM_GROUPS {
        layers.extend(build_group(config, g, group_input_channels(config, g), rng));
    }
    let last = config.group_channels()[NUM_GROUPS - 1];
    if config.backbone == Backbone::Wrn28 {
        layers.push(Layer::Norm(BatchNorm2d::new(last)));
        layers.push(Layer::Relu(Relu::default()));
    }
    layers.push(Layer::AvgPool(GlobalAvgPool::default()));
    layers.push(Layer::Linear(Linear::new(last, config.num_classes, rng)));
    Sequential::new(layers)
}

/// Per-head class scores, `[batch, heads, classes]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub batch: usize,
    pub heads: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn zeros(batch: usize, heads: usize, classes: usize) -> Self {
        Self {
            batch,
            heads,
            classes,
            data: vec![0.0; batch * heads * classes],
        }
    }

    #[inline]
    pub fn get(&self, b: usize, m: usize) -> &[f64] {
        let o = (b * self.heads + m) * self.classes;
        &self.data[o..o + self.classes]
    }

    #[inline]
    pub fn get_mut(&mut self, b: usize, m: usize) -> &mut [f64] {
        let o = (b * self.heads + m) * self.classes;
        &mut self.data[o..o + self.classes]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Assembles logits from per-head `[batch, classes]` row-major blocks.
    pub fn from_heads(per_head: &[Vec<f64>], batch: usize, classes: usize) -> Self {
        let mut out = Self::zeros(batch, per_head.len(), classes);
        for (m, rows) in per_head.iter().enumerate() {
            for b in 0..batch {
                out.get_mut(b, m).copy_from_slice(&rows[b * classes..(b + 1) * classes]);
            }
        }
        out
    }

    pub fn head_rows(&self, m: usize) -> Vec<f64> {
        (0..self.batch).flat_map(|b| self.get(b, m).to_vec()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub shared: usize,
    pub per_head: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct MultiHeadModel {
    pub config: ModelConfig,
    pub trunk: Sequential,
    pub heads: Vec<Sequential>,
    routed: Option<RoutedCache>,
}

#[derive(Clone, Debug)]
struct RoutedCache {
    routes: Vec<Vec<Range<usize>>>,
    trunk_shape: (usize, usize, usize, usize),
}

/// Named model tensor, as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Trainer-side rows of a combined batch that each head sees.
pub type Routes = Vec<Vec<Range<usize>>>;

impl MultiHeadModel {
    /// Trunk draws from `seed`; head `m` from `seed + m + 1` (all heads from
    /// `seed + 1` when `same_head_init` is set).
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let trunk = build_trunk(config, &mut ChaCha8Rng::seed_from_u64(seed));
        let heads = (0..config.num_heads)
            .map(|m| {
                let offset = if config.same_head_init { 1 } else { m as u64 + 1 };
                build_head(config, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(offset)))
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            trunk,
            heads,
            routed: None,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn count_parameters(&self) -> ParameterCount {
        let count = |s: &Sequential| {
            let mut c = ParamCounter(0);
            s.visit("", &mut c);
            c.0
        };
        let shared = count(&self.trunk);
        let per_head = self.heads.first().map(count).unwrap_or(0);
        ParameterCount {
            shared,
            per_head,
            total: shared + self.heads.iter().map(count).sum::<usize>(),
        }
    }

    /// Every head evaluated on the shared features of every image.
    pub fn forward(&mut self, images: &FeatureMap, mode: Mode) -> Result<Logits> {
        let routes = vec![vec![0..images.batch]; self.num_heads()];
        let per_head = self.forward_routed(images, &routes, mode)?;
        Ok(Logits::from_heads(&per_head, images.batch, self.num_classes()))
    }

    /// Runs the trunk once on `images`, then head `m` on the rows `routes[m]`.
    /// Returns per-head `[rows, classes]` row-major logits.
    pub fn forward_routed(
        &mut self,
        images: &FeatureMap,
        routes: &[Vec<Range<usize>>],
        mode: Mode,
    ) -> Result<Vec<Vec<f64>>> {
        if images.channels != Image::CHANNELS {
            return Err(Error::contract(format!(
                "expected {} input channels, got {}",
                Image::CHANNELS,
                images.channels
            )));
        }
        if routes.len() != self.num_heads() {
            return Err(Error::contract("one route per head required"));
        }
        if routes.iter().flatten().any(|r| r.end > images.batch) {
            return Err(Error::contract("route exceeds the batch"));
        }
        let min_side = 1 << (NUM_GROUPS - 1);
        if images.height < min_side || images.width < min_side {
            return Err(Error::contract(format!(
                "images must be at least {min_side}x{min_side}"
            )));
        }
        let features = self.trunk.forward(images, mode);
        let mut out = Vec::with_capacity(self.num_heads());
        for (head, rows) in self.heads.iter_mut().zip(routes) {
            let input = if rows.len() == 1 && rows[0] == (0..features.batch) {
                features.clone()
            } else {
                features.gather(rows)
            };
            out.push(head.forward(&input, mode).to_rows());
        }
        self.routed = (mode == Mode::Train).then(|| RoutedCache {
            routes: routes.to_vec(),
            trunk_shape: (features.channels, features.batch, features.height, features.width),
        });
        Ok(out)
    }

    /// Back-propagates per-head logit gradients (`[rows, classes]` blocks
    /// aligned with the last train-mode [`forward_routed`](Self::forward_routed)),
    /// accumulating into every parameter's `grad`.
    pub fn backward_routed(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        let cache = self
            .routed
            .take()
            .ok_or_else(|| Error::contract("backward without a train-mode forward"))?;
        let (c, n, h, w) = cache.trunk_shape;
        let mut dfeat = FeatureMap::zeros(c, n, h, w);
        for ((head, rows), g) in self.heads.iter_mut().zip(&cache.routes).zip(grads) {
            let batch: usize = rows.iter().map(|r| r.len()).sum();
            let dlogits = FeatureMap::from_rows(g, batch, self.config.num_classes);
            let dx = head.backward(&dlogits);
            dfeat.scatter_add(rows, &dx);
        }
        self.trunk.backward(&dfeat);
        Ok(())
    }

    pub fn backward(&mut self, grad: &Logits) -> Result<()> {
        let per_head: Vec<Vec<f64>> = (0..grad.heads).map(|m| grad.head_rows(m)).collect();
        self.backward_routed(&per_head)
    }

    pub fn visit(&self, v: &mut dyn StateVisitor) {
        self.trunk.visit("trunk", v);
        for (m, h) in self.heads.iter().enumerate() {
            h.visit(&format!("head{m}"), v);
        }
    }

    pub fn visit_mut(&mut self, v: &mut dyn StateVisitorMut) {
        self.trunk.visit_mut("trunk", v);
        for (m, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&format!("head{m}"), v);
        }
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut Param)) {
        struct V<'a>(&'a mut dyn FnMut(&mut Param));
        impl StateVisitorMut for V<'_> {
            fn param(&mut self, _: &str, p: &mut Param) {
                (self.0)(p)
            }
            fn buffer(&mut self, _: &str, _: &[usize], _: &mut Vec<f64>) {}
        }
        self.visit_mut(&mut V(&mut f));
    }

    pub fn zero_grad(&mut self) {
        self.for_each_param_mut(|p| p.grad.fill(0.0));
    }

    /// Parameter gradients in visiting order.
    pub fn gradients(&self) -> Vec<Vec<f64>> {
        struct V(Vec<Vec<f64>>);
        impl StateVisitor for V {
            fn param(&mut self, _: &str, p: &Param) {
                self.0.push(p.grad.clone());
            }
            fn buffer(&mut self, _: &str, _: &[usize], _: &[f64]) {}
        }
        let mut v = V(Vec::new());
        self.visit(&mut v);
        v.0
    }

    /// Every parameter and buffer value, flattened in visiting order.
    pub fn flat_state(&self) -> Vec<f64> {
        struct V(Vec<f64>);
        impl StateVisitor for V {
            fn param(&mut self, _: &str, p: &Param) {
                self.0.extend_from_slice(&p.value);
            }
            fn buffer(&mut self, _: &str, _: &[usize], b: &[f64]) {
                self.0.extend_from_slice(b);
            }
        }
        let mut v = V(Vec::new());
        self.visit(&mut v);
        v.0
    }

    /// Overwrites state from [`flat_state`](Self::flat_state) output.
    pub fn load_flat_state(&mut self, flat: &[f64]) -> Result<()> {
        struct V<'a> {
            src: &'a [f64],
            pos: usize,
            short: bool,
        }
        impl V<'_> {
            fn fill(&mut self, dst: &mut [f64]) {
                if self.pos + dst.len() > self.src.len() {
                    self.short = true;
                    return;
                }
                dst.copy_from_slice(&self.src[self.pos..self.pos + dst.len()]);
                self.pos += dst.len();
            }
        }
        impl StateVisitorMut for V<'_> {
            fn param(&mut self, _: &str, p: &mut Param) {
                self.fill(&mut p.value);
            }
            fn buffer(&mut self, _: &str, _: &[usize], b: &mut Vec<f64>) {
                self.fill(b);
            }
        }
        let mut v = V {
            src: flat,
            pos: 0,
            short: false,
        };
        self.visit_mut(&mut v);
        if v.short || v.pos != flat.len() {
            return Err(Error::contract("flat state length does not match the model"));
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        struct V(Vec<NamedTensor>);
        impl StateVisitor for V {
            fn param(&mut self, name: &str, p: &Param) {
                self.0.push(NamedTensor {
                    name: name.to_owned(),
                    trainable: true,
                    shape: p.shape.clone(),
                    values: p.value.clone(),
                });
            }
            fn buffer(&mut self, name: &str, shape: &[usize], b: &[f64]) {
                self.0.push(NamedTensor {
                    name: name.to_owned(),
                    trainable: false,
                    shape: shape.to_vec(),
                    values: b.to_vec(),
                });
            }
        }
        let mut v = V(Vec::new());
        self.visit(&mut v);
        v.0
    }

    pub fn load_named_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        struct V<'a> {
            src: std::collections::HashMap<&'a str, &'a NamedTensor>,
            error: Option<String>,
            used: usize,
        }
        impl V<'_> {
            fn fill(&mut self, name: &str, shape: &[usize], dst: &mut [f64]) {
                match self.src.get(name) {
                    Some(t) if t.shape == shape && t.values.len() == dst.len() => {
                        dst.copy_from_slice(&t.values);
                        self.used += 1;
                    }
                    Some(_) => {
                        self.error.get_or_insert(format!("shape mismatch for {name}"));
                    }
                    None => {
                        self.error.get_or_insert(format!("missing tensor {name}"));
                    }
                }
            }
        }
        impl StateVisitorMut for V<'_> {
            fn param(&mut self, name: &str, p: &mut Param) {
                let shape = p.shape.clone();
                self.fill(name, &shape, &mut p.value);
            }
            fn buffer(&mut self, name: &str, shape: &[usize], b: &mut Vec<f64>) {
                self.fill(name, shape, b);
            }
        }
        let mut v = V {
            src: tensors.iter().map(|t| (t.name.as_str(), t)).collect(),
            error: None,
            used: 0,
        };
        self.visit_mut(&mut v);
        if let Some(e) = v.error {
            return Err(Error::Incompatible(e));
        }
        if v.used != tensors.len() {
            return Err(Error::Incompatible("checkpoint has tensors the model lacks".into()));
        }
        Ok(())
    }
}

struct ParamCounter(usize);

impl StateVisitor for ParamCounter {
    fn param(&mut self, _: &str, p: &Param) {
        self.0 += p.len();
    }
    fn buffer(&mut self, _: &str, _: &[usize], _: &[f64]) {}
}

/// Stacks images into a channel-major batch, standardising each channel.
pub fn images_to_batch<'a>(
    images: impl IntoIterator<Item = &'a Image>,
    stats: &ChannelStats,
) -> Result<FeatureMap> {
    let images: Vec<&Image> = images.into_iter().collect();
    let first = images
        .first()
        .ok_or_else(|| Error::contract("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    if images.iter().any(|i| i.height != h || i.width != w) {
        return Err(Error::contract("images in a batch must share dimensions"));
    }
    let n = images.len();
    let plane = h * w;
    let mut fm = FeatureMap::zeros(Image::CHANNELS, n, h, w);
    for c in 0..Image::CHANNELS {
        let (mean, std) = (stats.mean[c], stats.std[c]);
        for (i, img) in images.iter().enumerate() {
            let dst = &mut fm.data[(c * n + i) * plane..(c * n + i + 1) * plane];
            for (d, s) in dst.iter_mut().zip(img.channel(c)) {
                *d = ((s - mean) / std) as f64;
            }
        }
    }
    Ok(fm)
}

/// Per-head argmax (ties to the smallest class index), `[batch][head]`.
pub fn predict_classes(logits: &Logits) -> Vec<Vec<usize>> {
    (0..logits.batch)
        .map(|b| (0..logits.heads).map(|m| argmax(logits.get(b, m))).collect())
        .collect()
}

/// Mean over heads of per-head `softmax(logits / temperature)`.
pub fn head_mean_probabilities(logits: &Logits, b: usize, temperature: f64) -> Vec<f64> {
    let mut sum = vec![0.0; logits.classes];
    for m in 0..logits.heads {
        let scaled: Vec<f64> = logits.get(b, m).iter().map(|v| v / temperature).collect();
        for (s, p) in sum.iter_mut().zip(softmax(&scaled)) {
            *s += p;
        }
    }
    sum.iter_mut().for_each(|s| *s /= logits.heads as f64);
    sum
}

/// Argmax of the sum over heads of per-head probability vectors. A single
/// head is its own ensemble.
pub fn ensemble_classes(logits: &Logits) -> Vec<usize> {
    if logits.heads == 1 {
        return (0..logits.batch).map(|b| argmax(logits.get(b, 0))).collect();
    }
    (0..logits.batch)
        .map(|b| argmax(&head_mean_probabilities(logits, b, 1.0)))
        .collect()
}

/// Evaluation chunk size for whole-dataset inference.
pub const EVAL_CHUNK: usize = 256;

/// Eval-mode logits for a list of images, evaluated in chunks.
pub fn infer(model: &mut MultiHeadModel, images: &[&Image], stats: &ChannelStats) -> Result<Logits> {
    let mut out = Logits::zeros(0, model.num_heads(), model.num_classes());
    for chunk in images.chunks(EVAL_CHUNK) {
        let batch = images_to_batch(chunk.iter().copied(), stats)?;
        let logits = model.forward(&batch, Mode::Eval)?;
        out.batch += logits.batch;
        out.data.extend(logits.data);
    }
    Ok(out)
}

pub fn ensemble_predict(
    model: &mut MultiHeadModel,
    images: &[&Image],
    stats: &ChannelStats,
) -> Result<Vec<usize>> {
    Ok(ensemble_classes(&infer(model, images, stats)?))
}
