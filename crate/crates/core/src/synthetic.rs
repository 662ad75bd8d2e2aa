//! Planted low-rank interaction data for tests, benches and the toy fixture.
//!
//! Every user and item gets a Gaussian latent factor. A user's items are
//! drawn without replacement with probability proportional to
//! `exp(signal * <u, v> + b_i)` (Gumbel top-k), where `b_i` is an item
//! popularity offset. A seeded fraction of each user's items becomes test.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, Normal};

use crate::dataset::{HeldoutUsers, InteractionDataset};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub rank: usize,
    pub items_per_user: usize,
    pub test_fraction: f64,
    /// Scale of the latent affinity term; larger is less noisy.
    pub signal: f64,
    /// Standard deviation of the item popularity offsets.
    pub popularity: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            num_users: 200,
            num_items: 200,
            rank: 8,
            items_per_user: 20,
            test_fraction: 0.2,
            signal: 3.0,
            popularity: 0.5,
            seed: 7,
        }
    }
}

struct Planted {
    items: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl Planted {
    fn new(cfg: &PlantedConfig, rng: &mut ChaCha8Rng) -> Self {
        let unit = Normal::new(0.0, 1.0 / (cfg.rank as f64).sqrt()).expect("valid std");
        let pop = Normal::new(0.0, cfg.popularity.max(0.0)).expect("valid std");
        let items = (0..cfg.num_items)
            .map(|_| (0..cfg.rank).map(|_| unit.sample(rng)).collect())
            .collect();
        let bias = (0..cfg.num_items).map(|_| pop.sample(rng)).collect();
        Planted { items, bias }
    }

    /// One user's interactions, in a random order, then split into
    /// `(train, test)`.
    fn user(&self, cfg: &PlantedConfig, rng: &mut ChaCha8Rng) -> (Vec<u32>, Vec<u32>) {
        let unit = Normal::new(0.0, 1.0 / (cfg.rank as f64).sqrt()).expect("valid std");
        let gumbel = Gumbel::new(0.0, 1.0).expect("valid scale");
        let latent: Vec<f64> = (0..cfg.rank).map(|_| unit.sample(rng)).collect();
        let mut keyed: Vec<(f64, u32)> = self
            .items
            .iter()
            .zip(&self.bias)
            .enumerate()
            .map(|(i, (v, b))| {
                let affinity: f64 = latent.iter().zip(v).map(|(a, b)| a * b).sum();
                (cfg.signal * affinity + b + gumbel.sample(rng), i as u32)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let n = cfg.items_per_user.min(cfg.num_items);
        let mut chosen: Vec<u32> = keyed[..n].iter().map(|&(_, i)| i).collect();
        chosen.shuffle(rng);
        let n_test = if n < 2 {
            0
        } else {
            ((n as f64 * cfg.test_fraction).round() as usize).min(n - 1)
        };
        let test = chosen.split_off(n - n_test);
        (chosen, test)
    }
}

/// Generate a dataset with identity ID vocabularies.
pub fn planted(cfg: &PlantedConfig) -> InteractionDataset {
    planted_with_heldout(cfg, 0).0
}

/// Generate a dataset plus `heldout` extra users drawn from the same item
/// factors, described only by a history and a test set.
pub fn planted_with_heldout(cfg: &PlantedConfig, heldout: usize) -> (InteractionDataset, HeldoutUsers) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = Planted::new(cfg, &mut rng);
    let (train, test): (Vec<_>, Vec<_>) = (0..cfg.num_users).map(|_| world.user(cfg, &mut rng)).unzip();
    let ds = InteractionDataset::from_sequences(cfg.num_items, train, test);
    let (history, test_pos): (Vec<_>, Vec<_>) = (0..heldout)
        .map(|_| {
            let (h, mut t) = world.user(cfg, &mut rng);
            t.sort_unstable();
            (h, t)
        })
        .unzip();
    let raw_ids = (0..heldout as u64).map(|u| cfg.num_users as u64 + u).collect();
    (
        ds,
        HeldoutUsers {
            raw_ids,
            history,
            test_pos,
        },
    )
}

/// Random catalogue scores for metric tests.
pub fn random_scores<R: Rng + ?Sized>(rng: &mut R, users: usize, items: usize) -> Vec<Vec<f32>> {
    (0..users)
        .map(|_| (0..items).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}
