//! Image datasets, labeled/unlabeled splitting and per-iteration batch sampling.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per CIFAR-10 binary record: one label byte then 3×32×32 planar pixels.
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;

/// Three-channel planar (`[channel][row][col]`) raster with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), Self::CHANNELS * height * width, "pixel buffer size");
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; Self::CHANNELS * height * width])
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[c * self.plane() + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let p = self.plane();
        self.pixels[c * p + y * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.pixels[c * self.plane()..(c + 1) * self.plane()]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.plane();
        &mut self.pixels[c * p..(c + 1) * p]
    }

    pub fn is_valid(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Pixels quantised to bytes (`round(v * 255)`), planar order.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Self {
        Self::new(height, width, bytes.iter().map(|b| *b as f32 / 255.0).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub image: Image,
    pub label: usize,
}

/// Decodes a CIFAR-10 binary batch file.
pub fn load_cifar10_binary(path: &Path) -> Result<Vec<LabeledExample>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cifar10(&bytes, CIFAR_CLASSES, CIFAR_SIDE, path)
}

/// Decodes records of `1 + 3·side²` bytes; `side = 32` is the CIFAR layout.
pub fn decode_cifar10(
    bytes: &[u8],
    num_classes: usize,
    side: usize,
    origin: &Path,
) -> Result<Vec<LabeledExample>> {
    let record = 1 + 3 * side * side;
    if bytes.len() % record != 0 {
        return Err(Error::MalformedDataset {
            path: origin.to_path_buf(),
            reason: format!(
                "size {} is not a multiple of the {record}-byte record length",
                bytes.len()
            ),
        });
    }
    bytes
        .chunks_exact(record)
        .enumerate()
        .map(|(index, rec)| {
            let label = rec[0];
            if label as usize >= num_classes {
                return Err(Error::CorruptRecord {
                    path: origin.to_path_buf(),
                    index,
                    label,
                    num_classes,
                });
            }
            Ok(LabeledExample {
                image: Image::from_bytes(side, side, &rec[1..]),
                label: label as usize,
            })
        })
        .collect()
}

/// Encodes examples in the CIFAR-10 record layout (label byte + planar pixel bytes).
pub fn encode_cifar10(examples: &[LabeledExample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for ex in examples {
        let label = u8::try_from(ex.label)
            .map_err(|_| Error::contract(format!("label {} does not fit a byte", ex.label)))?;
        out.push(label);
        out.extend(ex.image.to_bytes());
    }
    Ok(out)
}

pub fn write_cifar10_binary(examples: &[LabeledExample], path: &Path) -> Result<()> {
    fs::write(path, encode_cifar10(examples)?).map_err(|e| Error::io(path, e))
}

/// CIFAR-10 train (`data_batch_1..5.bin`) and test (`test_batch.bin`) sets under `root`.
pub fn load_cifar10_dir(root: &Path) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    let mut train = Vec::new();
    for i in 1..=5 {
        train.extend(load_cifar10_binary(&root.join(format!("data_batch_{i}.bin")))?);
    }
    let test = load_cifar10_binary(&root.join("test_batch.bin"))?;
    Ok((train, test))
}

/// Parameters of the procedural desk-scale dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Standard deviation of the additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f32,
}

fn default_noise() -> f32 {
    0.2
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Self {
        Self {
            num_classes,
            per_class,
            image_size,
            seed,
            noise: default_noise(),
        }
    }
}

/// Procedural textures: every class is a distinct periodic pattern (stripe
/// orientation / lattice family) rendered with random colours, frequency,
/// phase and contrast, plus Gaussian noise. Patterns are mirror-symmetric so
/// horizontal flips keep the class.
pub fn make_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<LabeledExample>> {
    if spec.num_classes < 2 {
        return Err(Error::config("synthetic dataset needs at least 2 classes"));
    }
    if spec.per_class == 0 || spec.image_size == 0 {
        return Err(Error::config("synthetic dataset sizes must be positive"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::config("synthetic noise must be a non-negative number"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0f32, spec.noise.max(f32::MIN_POSITIVE)).expect("valid noise");
    let side = spec.image_size;
    let mut out = Vec::with_capacity(spec.num_classes * spec.per_class);
    for _ in 0..spec.per_class {
        for class in 0..spec.num_classes {
            let angle = class_angle(class, spec.num_classes);
            let freq = rng.random_range(0.18..0.42) * std::f32::consts::PI;
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let contrast = rng.random_range(0.15..0.5);
            let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
            let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0f32));
            let lattice = class >= 4 && class % 2 == 0;
            let (ux, uy) = (angle.cos(), angle.sin());
            let mut image = Image::filled(side, side, 0.0);
            let centre = (side as f32 - 1.0) / 2.0;
            for y in 0..side {
                for x in 0..side {
                    // Mirror about the vertical axis so flips preserve the pattern family.
                    let fx = (x as f32 - centre).abs();
                    let fy = y as f32 - centre;
                    let mut wave = (freq * (fx * ux + fy * uy) + phase).cos();
                    if lattice {
                        wave *= (freq * (fx * uy - fy * ux) + phase).cos();
                    }
                    for (c, (b, t)) in base.iter().zip(&tint).enumerate() {
                        let v = b + contrast * wave * t + noise.sample(&mut rng);
                        image.set(c, y, x, v.clamp(0.0, 1.0));
                    }
                }
            }
            // Round-trip through bytes so the dataset is exactly representable on disk.
            let image = Image::from_bytes(side, side, &image.to_bytes());
            out.push(LabeledExample { image, label: class });
        }
    }
    Ok(out)
}

/// Stripe orientation per class: 0° and 90° first, then symmetric diagonals.
fn class_angle(class: usize, num_classes: usize) -> f32 {
    use std::f32::consts::PI;
    const ANGLES: [f32; 4] = [0.0, PI / 2.0, PI / 4.0, PI / 8.0];
    if class < ANGLES.len() {
        ANGLES[class]
    } else {
        PI * (class as f32 + 0.5) / (2.0 * num_classes as f32)
    }
}

/// Per-channel mean and standard deviation of a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl ChannelStats {
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a Image>) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for img in images {
            for c in 0..3 {
                for v in img.channel(c) {
                    sum[c] += *v as f64;
                    sq[c] += (*v as f64) * (*v as f64);
                }
            }
            count += img.plane();
        }
        if count == 0 {
            return Self::default();
        }
        let n = count as f64;
        let mean = sum.map(|s| s / n);
        let std: [f32; 3] = std::array::from_fn(|c| {
            let var = (sq[c] / n - mean[c] * mean[c]).max(0.0);
            var.sqrt().max(1e-3) as f32
        });
        Self {
            mean: mean.map(|m| m as f32),
            std,
        }
    }
}

/// Labeled and unlabeled pools drawn from one training set.
///
/// Ground truth for the unlabeled pool lives in a separate field that the
/// batch iterator never reads; it is only used by diagnostics.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub labeled: Vec<LabeledExample>,
    pub unlabeled: Vec<Image>,
    pub num_classes: usize,
    pub seed: u64,
    pub labeled_indices: Vec<usize>,
    pub unlabeled_indices: Vec<usize>,
    unlabeled_truth: Vec<usize>,
    pub normalization: ChannelStats,
}

impl DatasetSplit {
    /// Held-out label of unlabeled example `i`, for pseudo-label accuracy diagnostics.
    pub fn unlabeled_ground_truth(&self, i: usize) -> usize {
        self.unlabeled_truth[i]
    }
}

/// Class-balanced labeled subset of size `n_labeled`; everything else becomes
/// unlabeled with its label stripped.
///
/// When `num_classes` does not divide `n_labeled`, the remainder goes to
/// randomly chosen classes, one extra label each.
pub fn split_labels(
    dataset: &[LabeledExample],
    num_classes: usize,
    n_labeled: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if n_labeled > dataset.len() {
        return Err(Error::config(format!(
            "requested {n_labeled} labels from a dataset of {}",
            dataset.len()
        )));
    }
    if n_labeled < num_classes {
        return Err(Error::config(format!(
            "a balanced split needs at least one label per class ({n_labeled} < {num_classes})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, ex) in dataset.iter().enumerate() {
        if ex.label >= num_classes {
            return Err(Error::contract(format!("label {} out of range", ex.label)));
        }
        by_class[ex.label].push(i);
    }
    let mut quota = vec![n_labeled / num_classes; num_classes];
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut rng);
    for &c in order.iter().take(n_labeled % num_classes) {
        quota[c] += 1;
    }
    let mut is_labeled = vec![false; dataset.len()];
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.len() < quota[c] {
            return Err(Error::config(format!(
                "class {c} has {} examples but {} labels were requested",
                members.len(),
                quota[c]
            )));
        }
        members.shuffle(&mut rng);
        for &i in &members[..quota[c]] {
            is_labeled[i] = true;
        }
    }
    let labeled_indices: Vec<usize> = (0..dataset.len()).filter(|&i| is_labeled[i]).collect();
    let unlabeled_indices: Vec<usize> = (0..dataset.len()).filter(|&i| !is_labeled[i]).collect();
    Ok(DatasetSplit {
        labeled: labeled_indices.iter().map(|&i| dataset[i].clone()).collect(),
        unlabeled: unlabeled_indices.iter().map(|&i| dataset[i].image.clone()).collect(),
        unlabeled_truth: unlabeled_indices.iter().map(|&i| dataset[i].label).collect(),
        num_classes,
        seed,
        normalization: ChannelStats::compute(dataset.iter().map(|e| &e.image)),
        labeled_indices,
        unlabeled_indices,
    })
}

#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub iteration: u64,
    pub examples: Vec<LabeledExample>,
}

/// Unlabeled images with their pool positions; carries no label information.
#[derive(Clone, Debug)]
pub struct UnlabeledBatch {
    pub iteration: u64,
    pub images: Vec<Image>,
    pub pool_indices: Vec<usize>,
}

/// Endless epoch-shuffled index stream over a pool of `len` items.
#[derive(Clone, Debug)]
pub struct IndexStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl IndexStream {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Infinite stream of `(LabeledBatch, UnlabeledBatch)` pairs with independent
/// reshuffling streams for the two pools.
pub struct BatchIterator<'a> {
    split: &'a DatasetSplit,
    batch_labeled: usize,
    batch_unlabeled: usize,
    labeled: IndexStream,
    unlabeled: Option<IndexStream>,
    iteration: u64,
}

impl<'a> BatchIterator<'a> {
    pub fn new(
        split: &'a DatasetSplit,
        batch_labeled: usize,
        batch_unlabeled: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_labeled == 0 {
            return Err(Error::config("labeled batch size must be at least 1"));
        }
        if split.labeled.is_empty() {
            return Err(Error::config("labeled pool is empty"));
        }
        if batch_unlabeled > 0 && split.unlabeled.is_empty() {
            return Err(Error::config(
                "unlabeled pool is empty but an unlabeled batch size was requested",
            ));
        }
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let labeled = IndexStream::new(split.labeled.len(), seeder.random());
        let unlabeled_seed: u64 = seeder.random();
        let unlabeled = (!split.unlabeled.is_empty())
            .then(|| IndexStream::new(split.unlabeled.len(), unlabeled_seed));
        Ok(Self {
            split,
            batch_labeled,
            batch_unlabeled,
            labeled,
            unlabeled,
            iteration: 0,
        })
    }

    /// Draws the next pair as pool indices only.
    pub fn next_indices(&mut self) -> (Vec<usize>, Vec<usize>) {
        let l = self.labeled.take(self.batch_labeled);
        let u = match &mut self.unlabeled {
            Some(s) => s.take(self.batch_unlabeled),
            None => Vec::new(),
        };
        (l, u)
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = (LabeledBatch, UnlabeledBatch);

    fn next(&mut self) -> Option<Self::Item> {
        let (l, u) = self.next_indices();
        let iteration = self.iteration;
        self.iteration += 1;
        Some((
            LabeledBatch {
                iteration,
                examples: l.iter().map(|&i| self.split.labeled[i].clone()).collect(),
            },
            UnlabeledBatch {
                iteration,
                images: u.iter().map(|&i| self.split.unlabeled[i].clone()).collect(),
                pool_indices: u,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..CIFAR_RECORD_LEN - 1).map(fill));
        r
    }

    #[test]
    fn decodes_two_records() {
        let mut bytes = record(3, |i| (i % 251) as u8);
        bytes.extend(record(9, |_| 255));
        let out = decode_cifar10(&bytes, 10, 32, Path::new("mem")).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].label, 3);
        assert_eq!(out[0].image.get(0, 0, 0), bytes[1] as f32 / 255.0);
        assert_eq!(out[0].image.get(1, 0, 0), bytes[1 + 1024] as f32 / 255.0);
        assert_eq!(out[1].label, 9);
        assert!(out[1].image.pixels.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn rejects_truncated_file() {
        let mut bytes = record(0, |_| 0);
        bytes.pop();
        let err = decode_cifar10(&bytes, 10, 32, Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::MalformedDataset { .. }));
    }

    #[test]
    fn label_boundary() {
        assert!(decode_cifar10(&record(9, |_| 0), 10, 32, Path::new("m")).is_ok());
        let err = decode_cifar10(&record(10, |_| 0), 10, 32, Path::new("m")).unwrap_err();
        assert!(matches!(err, Error::CorruptRecord { label: 10, .. }));
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SyntheticSpec::new(2, 5, 8, 7);
        let a = make_synthetic_dataset(&spec).unwrap();
        let b = make_synthetic_dataset(&spec).unwrap();
        assert_eq!(a, b);
        for c in 0..2 {
            assert_eq!(a.iter().filter(|e| e.label == c).count(), 5);
        }
        assert!(a.iter().all(|e| e.image.is_valid()));
    }

    #[test]
    fn synthetic_seeds_differ() {
        let a = make_synthetic_dataset(&SyntheticSpec::new(2, 5, 8, 7)).unwrap();
        let b = make_synthetic_dataset(&SyntheticSpec::new(2, 5, 8, 8)).unwrap();
        assert_ne!(encode_cifar10(&a).unwrap(), encode_cifar10(&b).unwrap());
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        assert!(make_synthetic_dataset(&SyntheticSpec::new(1, 5, 8, 0)).is_err());
        assert!(make_synthetic_dataset(&SyntheticSpec::new(2, 0, 8, 0)).is_err());
        assert!(make_synthetic_dataset(&SyntheticSpec::new(2, 5, 0, 0)).is_err());
    }

    #[test]
    fn synthetic_round_trips_through_record_format() {
        let ds = make_synthetic_dataset(&SyntheticSpec::new(3, 2, 32, 1)).unwrap();
        let bytes = encode_cifar10(&ds).unwrap();
        assert_eq!(bytes.len(), 6 * CIFAR_RECORD_LEN);
        let back = decode_cifar10(&bytes, 3, 32, Path::new("mem")).unwrap();
        assert_eq!(back, ds);
    }

    fn toy(n_per_class: usize, classes: usize) -> Vec<LabeledExample> {
        make_synthetic_dataset(&SyntheticSpec::new(classes, n_per_class, 4, 3)).unwrap()
    }

    #[test]
    fn balanced_split() {
        let ds = toy(10, 10);
        let split = split_labels(&ds, 10, 10, 0).unwrap();
        assert_eq!(split.labeled.len(), 10);
        assert_eq!(split.unlabeled.len(), 90);
        for c in 0..10 {
            assert_eq!(split.labeled.iter().filter(|e| e.label == c).count(), 1);
        }
        let mut all: Vec<usize> = split
            .labeled_indices
            .iter()
            .chain(&split.unlabeled_indices)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn full_label_budget_leaves_no_unlabeled() {
        let ds = toy(3, 2);
        let split = split_labels(&ds, 2, 6, 1).unwrap();
        assert!(split.unlabeled.is_empty());
    }

    #[test]
    fn split_is_deterministic() {
        let ds = toy(10, 4);
        let a = split_labels(&ds, 4, 8, 5).unwrap();
        let b = split_labels(&ds, 4, 8, 5).unwrap();
        assert_eq!(a.labeled_indices, b.labeled_indices);
        let c = split_labels(&ds, 4, 8, 6).unwrap();
        assert_ne!(a.labeled_indices, c.labeled_indices);
    }

    #[test]
    fn split_errors() {
        let ds = toy(3, 4);
        assert!(matches!(split_labels(&ds, 4, 3, 0), Err(Error::Config(_))));
        assert!(matches!(split_labels(&ds, 4, 13, 0), Err(Error::Config(_))));
    }

    #[test]
    fn uneven_budget_spreads_remainder() {
        let ds = toy(10, 4);
        let split = split_labels(&ds, 4, 10, 2).unwrap();
        let mut counts: Vec<usize> = (0..4)
            .map(|c| split.labeled.iter().filter(|e| e.label == c).count())
            .collect();
        counts.sort_unstable();
        assert_eq!(counts, vec![2, 2, 3, 3]);
    }

    #[test]
    fn batches_wrap_on_exhaustion() {
        let ds = toy(5, 2);
        let split = split_labels(&ds, 2, 10, 0).unwrap();
        let mut split = split;
        split.unlabeled = vec![Image::filled(4, 4, 0.5)];
        let mut it = BatchIterator::new(&split, 64, 448, 9).unwrap();
        let (l, u) = it.next().unwrap();
        assert_eq!(l.examples.len(), 64);
        assert_eq!(u.images.len(), 448);
        let (l2, _) = it.next().unwrap();
        assert_eq!(l2.iteration, 1);
    }

    #[test]
    fn every_index_used_once_per_epoch() {
        let mut s = IndexStream::new(10, 4);
        let mut first = s.take(10);
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_stream_is_deterministic() {
        let ds = toy(20, 2);
        let split = split_labels(&ds, 2, 4, 0).unwrap();
        let seq = |seed| {
            let mut it = BatchIterator::new(&split, 3, 5, seed).unwrap();
            (0..100).map(|_| it.next_indices()).collect::<Vec<_>>()
        };
        assert_eq!(seq(11), seq(11));
        assert_ne!(seq(11), seq(12));
    }

    #[test]
    fn empty_unlabeled_pool_rejected() {
        let ds = toy(2, 2);
        let split = split_labels(&ds, 2, 4, 0).unwrap();
        assert!(BatchIterator::new(&split, 2, 4, 0).is_err());
        assert!(BatchIterator::new(&split, 2, 0, 0).is_ok());
    }
}
