//! Full-catalog ranking and top-K accuracy metrics.
//!
//! Every item is scored for every evaluated user, the user's training
//! positives are pushed to the bottom, and the top `max(K)` items are kept.
//! Ties are broken by ascending item index so results are reproducible.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{HistoryTable, InteractionDataset};
use crate::encoder::{dot, norm, user_representation, EncoderConfig, ModelParams, Similarity};
use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no user has a non-empty test set")]
    NoEvalUsers,
    #[error("cutoff list is empty or contains 0")]
    BadCutoffs,
    #[error("{rankings} rankings for {users} users")]
    LengthMismatch { rankings: usize, users: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TopKMetrics {
    pub recall: f64,
    pub ndcg: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub by_k: BTreeMap<usize, TopKMetrics>,
    pub num_eval_users: usize,
}

impl MetricReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.by_k.get(&k).map_or(0.0, |m| m.recall)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.by_k.get(&k).map_or(0.0, |m| m.ndcg)
    }

    /// One `key=value` line per cutoff.
    pub fn to_kv_lines(&self) -> Vec<String> {
        self.by_k
            .iter()
            .map(|(k, m)| {
                format!(
                    "k={k} recall={:.6} ndcg={:.6} precision={:.6} f1={:.6} users={}",
                    m.recall, m.ndcg, m.precision, m.f1, self.num_eval_users
                )
            })
            .collect()
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Best-first comparison: higher score, then lower item index.
fn rank_order(a: &(f32, u32), b: &(f32, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Top-`k` item indices by score, skipping the items in `exclude` (sorted).
/// Signed zeros compare equal, so `-0.0` and `0.0` tie and fall back to index.
pub fn top_k(scores: &[f32], exclude: &[u32], k: usize) -> Vec<u32> {
    let mut skip = exclude.iter().peekable();
    let mut cand: Vec<(f32, u32)> = Vec::with_capacity(scores.len());
    for (i, &s) in scores.iter().enumerate() {
        let i = i as u32;
        while skip.next_if(|&&e| e < i).is_some() {}
        if skip.next_if_eq(&&i).is_some() {
            continue;
        }
        cand.push((s + 0.0, i));
    }
    let k = k.min(cand.len());
    if k == 0 {
        return Vec::new();
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, rank_order);
        cand.truncate(k);
    }
    cand.sort_unstable_by(rank_order);
    cand.into_iter().map(|(_, i)| i).collect()
}

/// Scores a user vector against the whole catalog (padding row excluded).
pub struct Scorer<'a> {
    params: &'a ModelParams<f32>,
    similarity: Similarity,
    eps: f32,
    inv_item_norms: Vec<f32>,
}

impl<'a> Scorer<'a> {
    pub fn new(params: &'a ModelParams<f32>, cfg: &EncoderConfig) -> Self {
        let eps = cfg.cosine_eps as f32;
        let inv_item_norms = (0..params.num_items)
            .map(|i| 1.0 / norm(params.item(i)).max(eps))
            .collect();
        Scorer {
            params,
            similarity: cfg.similarity,
            eps,
            inv_item_norms,
        }
    }

    pub fn score_all(&self, h: &[f32]) -> Vec<f32> {
        let inv_h = match self.similarity {
            Similarity::Cosine => 1.0 / norm(h).max(self.eps),
            Similarity::Dot => 1.0,
        };
        (0..self.params.num_items)
            .map(|i| {
                let s = dot(h, self.params.item(i));
                match self.similarity {
                    Similarity::Cosine => s * inv_h * self.inv_item_norms[i],
                    Similarity::Dot => s,
                }
            })
            .collect()
    }
}

/// Ranked top-`k` items for a training user.
pub fn rank_user(
    user: usize,
    params: &ModelParams<f32>,
    cfg: &EncoderConfig,
    ds: &InteractionDataset,
    ht: &HistoryTable,
    k: usize,
) -> Vec<u32> {
    let scorer = Scorer::new(params, cfg);
    let h = user_representation(params, cfg, user, ht.items(user), ht.mask(user));
    top_k(&scorer.score_all(&h), &ds.train_pos[user], k)
}

fn user_metrics(ranking: &[u32], test: &[u32], k: usize) -> TopKMetrics {
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (r, item) in ranking.iter().take(k).enumerate() {
        if test.binary_search(item).is_ok() {
            hits += 1;
            dcg += 1.0 / ((r + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..k.min(test.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    let recall = hits as f64 / test.len() as f64;
    let precision = hits as f64 / k as f64;
    TopKMetrics {
        recall,
        ndcg: if idcg > 0.0 { dcg / idcg } else { 0.0 },
        precision,
        f1: harmonic(precision, recall),
    }
}

/// Average Recall/NDCG/Precision/F1 at each cutoff over users with a
/// non-empty test set. `test_pos` rows must be sorted.
pub fn compute_metrics(
    rankings: &[Vec<u32>],
    test_pos: &[Vec<u32>],
    ks: &[usize],
) -> Result<MetricReport, MetricsError> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(MetricsError::BadCutoffs);
    }
    if rankings.len() != test_pos.len() {
        return Err(MetricsError::LengthMismatch {
            rankings: rankings.len(),
            users: test_pos.len(),
        });
    }
    let users: Vec<usize> = (0..test_pos.len()).filter(|&u| !test_pos[u].is_empty()).collect();
    if users.is_empty() {
        return Err(MetricsError::NoEvalUsers);
    }
    let n = users.len() as f64;
    let mut by_k = BTreeMap::new();
    for &k in ks {
        let per_user: Vec<TopKMetrics> = users
            .iter()
            .map(|&u| user_metrics(&rankings[u], &test_pos[u], k))
            .collect();
        let mean = |f: fn(&TopKMetrics) -> f64| par::compensated_sum(per_user.iter().map(f)) / n;
        by_k.insert(
            k,
            TopKMetrics {
                recall: mean(|m| m.recall),
                ndcg: mean(|m| m.ndcg),
                precision: mean(|m| m.precision),
                f1: mean(|m| m.f1),
            },
        );
    }
    Ok(MetricReport {
        by_k,
        num_eval_users: users.len(),
    })
}

/// Rank every user with a non-empty test row, in parallel, and score the
/// rankings. `user_vec` produces the representation of user `u`; `exclude`
/// holds each user's sorted already-seen items.
pub fn evaluate_with<F>(
    params: &ModelParams<f32>,
    cfg: &EncoderConfig,
    user_vec: F,
    exclude: &[Vec<u32>],
    test_pos: &[Vec<u32>],
    ks: &[usize],
) -> Result<MetricReport, MetricsError>
where
    F: Fn(usize) -> Vec<f32> + Sync + Send,
{
    let kmax = ks.iter().copied().max().ok_or(MetricsError::BadCutoffs)?;
    let scorer = Scorer::new(params, cfg);
    let rankings = par::map_indexed(test_pos.len(), |u| {
        if test_pos[u].is_empty() {
            return Vec::new();
        }
        let h = user_vec(u);
        top_k(&scorer.score_all(&h), &exclude[u], kmax)
    });
    compute_metrics(&rankings, test_pos, ks)
}

/// Full-ranking evaluation of training users against `test_pos`.
pub fn evaluate(
    params: &ModelParams<f32>,
    cfg: &EncoderConfig,
    ds: &InteractionDataset,
    ht: &HistoryTable,
    test_pos: &[Vec<u32>],
    ks: &[usize],
) -> Result<MetricReport, MetricsError> {
    evaluate_with(
        params,
        cfg,
        |u| user_representation(params, cfg, u, ht.items(u), ht.mask(u)),
        &ds.train_pos,
        test_pos,
        ks,
    )
}

/// Non-personalized baseline: rank by training popularity, ties by index.
pub fn item_pop_report(
    ds: &InteractionDataset,
    test_pos: &[Vec<u32>],
    ks: &[usize],
) -> Result<MetricReport, MetricsError> {
    let kmax = ks.iter().copied().max().ok_or(MetricsError::BadCutoffs)?;
    let scores: Vec<f32> = ds.item_popularity().into_iter().map(|c| c as f32).collect();
    let rankings: Vec<Vec<u32>> = (0..ds.num_users)
        .map(|u| top_k(&scores, &ds.train_pos[u], kmax))
        .collect();
    compute_metrics(&rankings, test_pos, ks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_sorting_masking_and_ties() {
        assert_eq!(top_k(&[0.9, 0.1, 0.5], &[], 2), vec![0, 2]);
        assert_eq!(top_k(&[0.9, 0.1, 0.5], &[0], 2), vec![2, 1]);
        assert_eq!(top_k(&[0.9, 0.1, 0.5], &[0], 5), vec![2, 1]);
        assert_eq!(top_k(&[-0.0, 0.0], &[], 2), vec![0, 1]);
        assert_eq!(top_k(&[0.3; 5], &[], 3), vec![0, 1, 2]);
        assert_eq!(top_k(&[0.3; 2], &[], 5), vec![0, 1]);
    }

    #[test]
    fn perfect_and_empty_rankings() {
        let r = compute_metrics(&[vec![4, 2]], &[vec![2, 4]], &[2]).unwrap();
        let m = r.by_k[&2];
        assert_eq!((m.recall, m.ndcg, m.precision, m.f1), (1.0, 1.0, 1.0, 1.0));
        let r = compute_metrics(&[vec![0, 1]], &[vec![2, 4]], &[2]).unwrap();
        assert_eq!(r.by_k[&2], TopKMetrics::default());
    }

    #[test]
    fn hand_evaluated_ndcg() {
        // topK = [a, b], test = {b, c}
        let r = compute_metrics(&[vec![0, 1]], &[vec![1, 2]], &[2]).unwrap();
        let m = r.by_k[&2];
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.precision, 0.5);
        let l3 = 3f64.log2();
        assert!((m.ndcg - (1.0 / l3) / (1.0 + 1.0 / l3)).abs() < 1e-15);
        assert!((m.ndcg - 0.3869).abs() < 5e-5);
    }

    #[test]
    fn empty_test_users_are_skipped() {
        let r = compute_metrics(&[vec![0], vec![]], &[vec![0], vec![]], &[1]).unwrap();
        assert_eq!(r.num_eval_users, 1);
        assert_eq!(r.recall(1), 1.0);
        assert_eq!(
            compute_metrics(&[vec![]], &[vec![]], &[1]),
            Err(MetricsError::NoEvalUsers)
        );
        assert_eq!(
            compute_metrics(&[vec![0]], &[vec![0]], &[]),
            Err(MetricsError::BadCutoffs)
        );
    }

    #[test]
    fn item_pop_ranks_by_count() {
        let ds = InteractionDataset::from_sequences(
            4,
            vec![vec![1, 2], vec![2], vec![3, 2]],
            vec![vec![3], vec![1], vec![]],
        );
        // popularity: item2=3, item1=1, item3=1, item0=0
        let r = item_pop_report(&ds, &ds.test_pos, &[1]).unwrap();
        // user0 excludes 1,2 -> top1 = 3 (hit); user1 excludes 2 -> top1 = 1 (hit)
        assert_eq!(r.recall(1), 1.0);
    }
}
