use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::teachers::Dataset;

const SHUFFLE_STREAM: u64 = 31;
const CAPTION_STREAM: u64 = 32;

/// Deterministic batches holding at most one caption per image.
///
/// Each epoch is a seeded permutation of the images cut into full batches;
/// every image in a batch contributes one seeded caption. A batch is a pure
/// function of `(seed, step)`, which makes resumed runs identical to
/// uninterrupted ones.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    /// Sample indices grouped by image, in ascending image id order.
    groups: Vec<Vec<usize>>,
    batch_size: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in dataset.samples.iter().enumerate() {
            by_image.entry(s.image_id).or_default().push(i);
        }
        let groups: Vec<Vec<usize>> = by_image.into_values().collect();
        if batch_size < 2 {
            return Err(Error::Configuration(format!("batch size must be at least 2, got {batch_size}")));
        }
        if batch_size > groups.len() {
            return Err(Error::Configuration(format!(
                "batch size {batch_size} exceeds the {} distinct training images",
                groups.len()
            )));
        }
        Ok(Self {
            groups,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.groups.len() / self.batch_size
    }

    /// Dataset indices of the batch used at optimizer step `step`.
    pub fn batch(&self, step: u64) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch() as u64;
        let (epoch, pos) = (step / per_epoch, (step % per_epoch) as usize);
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        order.shuffle(&mut seeded(derive_seed(self.seed, &[SHUFFLE_STREAM, epoch])));
        order[pos * self.batch_size..(pos + 1) * self.batch_size]
            .iter()
            .map(|&g| {
                let captions = &self.groups[g];
                let mut rng = seeded(derive_seed(self.seed, &[CAPTION_STREAM, epoch, g as u64]));
                captions[rng.random_range(0..captions.len())]
            })
            .collect()
    }
}
