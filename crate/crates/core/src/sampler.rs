//! Uniform negative sampling and per-epoch batch assembly.
//!
//! Randomness comes from ChaCha8 streams keyed by `(seed, epoch)` with the
//! batch index as the stream id, so any batch can be rebuilt independently
//! and the result never depends on how many threads built it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{HistoryTable, InteractionDataset};
use crate::encoder::Example;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("user {user} has interacted with every item, so no negative exists")]
    NoCandidates { user: usize },
    #[error("the catalog is empty")]
    EmptyCatalog,
    #[error("the training set is empty")]
    EmptyTrainingSet,
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("num_negatives must be at least 1")]
    ZeroNegatives,
    #[error("max_rejection_retries must be at least 1")]
    ZeroRetries,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub num_negatives: usize,
    pub exclude_train_positives: bool,
    pub max_rejection_retries: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_negatives: 100,
            exclude_train_positives: true,
            max_rejection_retries: 64,
            seed: 2021,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.num_negatives == 0 {
            return Err(SamplerError::ZeroNegatives);
        }
        if self.max_rejection_retries == 0 {
            return Err(SamplerError::ZeroRetries);
        }
        Ok(())
    }
}

/// The generator for `(seed, epoch)` positioned on `stream`.
pub fn stream_rng(seed: u64, epoch: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(b"negsampl");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Draw `cfg.num_negatives` items uniformly with replacement.
///
/// With exclusion on, a draw that hits one of the user's train positives is
/// redrawn up to `max_rejection_retries` times; after that the last draw is
/// kept as is.
pub fn sample_negatives<R: Rng + ?Sized>(
    user: usize,
    ds: &InteractionDataset,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<u32>, SamplerError> {
    let mut out = Vec::with_capacity(cfg.num_negatives);
    sample_negatives_into(user, ds, cfg, rng, &mut out)?;
    Ok(out)
}

fn sample_negatives_into<R: Rng + ?Sized>(
    user: usize,
    ds: &InteractionDataset,
    cfg: &SamplerConfig,
    rng: &mut R,
    out: &mut Vec<u32>,
) -> Result<(), SamplerError> {
    let n = ds.num_items as u32;
    if n == 0 {
        return Err(SamplerError::EmptyCatalog);
    }
    let positives = &ds.train_pos[user];
    if cfg.exclude_train_positives && positives.len() >= ds.num_items {
        return Err(SamplerError::NoCandidates { user });
    }
    for _ in 0..cfg.num_negatives {
        let mut item = rng.random_range(0..n);
        if cfg.exclude_train_positives {
            let mut tries = 0;
            while tries < cfg.max_rejection_retries && positives.binary_search(&item).is_ok() {
                item = rng.random_range(0..n);
                tries += 1;
            }
        }
        out.push(item);
    }
    Ok(())
}

/// `(user, positive, negatives)` tuples for one optimizer step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub users: Vec<u32>,
    pub pos_items: Vec<u32>,
    /// `len() x num_negatives`, row-major.
    pub neg_items: Vec<u32>,
    pub num_negatives: usize,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn negs(&self, n: usize) -> &[u32] {
        &self.neg_items[n * self.num_negatives..(n + 1) * self.num_negatives]
    }

    /// Encoder inputs, with history windows borrowed from `ht`.
    pub fn examples<'a>(&'a self, ht: &'a HistoryTable) -> Vec<Example<'a>> {
        (0..self.len())
            .map(|n| {
                let u = self.users[n] as usize;
                Example {
                    user: self.users[n],
                    pos: self.pos_items[n],
                    negs: self.negs(n),
                    hist_items: ht.items(u),
                    hist_mask: ht.mask(u),
                }
            })
            .collect()
    }
}

/// One epoch: every training pair once, in a seeded order, split into batches.
#[derive(Debug, Clone)]
pub struct EpochBatches<'a> {
    ds: &'a InteractionDataset,
    cfg: SamplerConfig,
    epoch: u64,
    batch_size: usize,
    pairs: Vec<(u32, u32)>,
    next: usize,
}

impl<'a> EpochBatches<'a> {
    pub fn num_batches(&self) -> usize {
        self.pairs.len().div_ceil(self.batch_size)
    }

    /// Pair order for this epoch.
    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    /// Build batch `b` with fresh negatives from its own stream.
    pub fn batch(&self, b: usize) -> Result<TrainBatch, SamplerError> {
        let lo = b * self.batch_size;
        let hi = (lo + self.batch_size).min(self.pairs.len());
        let slice = &self.pairs[lo..hi];
        let mut rng = stream_rng(self.cfg.seed, self.epoch, b as u64);
        let mut neg_items = Vec::with_capacity(slice.len() * self.cfg.num_negatives);
        for &(u, _) in slice {
            sample_negatives_into(u as usize, self.ds, &self.cfg, &mut rng, &mut neg_items)?;
        }
        Ok(TrainBatch {
            users: slice.iter().map(|p| p.0).collect(),
            pos_items: slice.iter().map(|p| p.1).collect(),
            neg_items,
            num_negatives: self.cfg.num_negatives,
        })
    }
}

impl Iterator for EpochBatches<'_> {
    type Item = Result<TrainBatch, SamplerError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.num_batches() {
            return None;
        }
        let b = self.next;
        self.next += 1;
        Some(self.batch(b))
    }
}

pub fn make_epoch_batches<'a>(
    ds: &'a InteractionDataset,
    cfg: &SamplerConfig,
    batch_size: usize,
    epoch: u64,
) -> Result<EpochBatches<'a>, SamplerError> {
    cfg.validate()?;
    if batch_size == 0 {
        return Err(SamplerError::ZeroBatch);
    }
    let mut pairs = ds.train_pairs();
    if pairs.is_empty() {
        return Err(SamplerError::EmptyTrainingSet);
    }
    let mut rng = stream_rng(cfg.seed, epoch, u64::MAX);
    pairs.shuffle(&mut rng);
    Ok(EpochBatches {
        ds,
        cfg: *cfg,
        epoch,
        batch_size,
        pairs,
        next: 0,
    })
}
