//! Fixtures shared by the benchmarks.

use mhct_core::data::{make_synthetic_dataset, SyntheticSpec};
use mhct_core::{Image, LabeledExample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn images(count: usize, side: usize) -> Vec<LabeledExample> {
    let per_class = count.div_ceil(4);
    let mut set = make_synthetic_dataset(&SyntheticSpec::new(4, per_class, side, 7)).expect("valid spec");
    set.truncate(count);
    set
}

pub fn image(side: usize) -> Image {
    images(1, side).remove(0).image
}

/// Random `[batch][heads]` class predictions.
pub fn predictions(batch: usize, heads: usize, classes: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| (0..heads).map(|_| rng.random_range(0..classes)).collect())
        .collect()
}
