//! Independent cross-checks: a central finite-difference gradient oracle and
//! a straight-line reference for the ranking metrics.
//!
//! The finite-difference path only ever calls the forward pass. Both the
//! forward pass and the analytic backward pass run in `f64` here.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::encoder::{
    backward, forward_batch, Aggregation, EncoderConfig, Example, ModelParams, ParamGrads,
    Similarity, Tensor,
};
use crate::loss::{self, LossConfig, LossKind};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum VerifyError {
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
    #[error("objective is not finite at coordinate {0}")]
    NonFinite(usize),
}

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences `(L(x + h e_i) - L(x - h e_i)) / 2h` for every
/// coordinate of `x`.
pub fn finite_diff_grad<F>(mut eval: F, x: &[f64], h: f64) -> Result<Vec<f64>, VerifyError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(VerifyError::BadStep(h));
    }
    let mut x = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = eval(&x);
        x[i] = orig - h;
        let down = eval(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(VerifyError::NonFinite(i));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Finite differences over every coordinate of every parameter tensor.
pub fn finite_diff_params<F>(
    eval: F,
    params: &ModelParams<f64>,
    h: f64,
) -> Result<ParamGrads<f64>, VerifyError>
where
    F: Fn(&ModelParams<f64>) -> f64,
{
    let mut work = params.clone();
    let mut grads = params.zeros_like();
    for t in Tensor::ALL {
        let base = params.tensor(t).to_vec();
        let g = finite_diff_grad(
            |x| {
                work.tensor_mut(t).copy_from_slice(x);
                eval(&work)
            },
            &base,
            h,
        )?;
        work.tensor_mut(t).copy_from_slice(&base);
        grads.tensor_mut(t).copy_from_slice(&g);
    }
    Ok(grads)
}

/// A tiny batch with its own parameters, used for gradient checks.
#[derive(Debug, Clone)]
pub struct GradInstance {
    pub params: ModelParams<f64>,
    pub users: Vec<u32>,
    pub pos: Vec<u32>,
    /// `users.len() x num_negatives`
    pub negs: Vec<u32>,
    pub num_negatives: usize,
    /// `users.len() x window`
    pub hist_items: Vec<u32>,
    pub hist_mask: Vec<bool>,
    pub window: usize,
}

impl GradInstance {
    pub fn examples(&self) -> Vec<Example<'_>> {
        (0..self.users.len())
            .map(|n| Example {
                user: self.users[n],
                pos: self.pos[n],
                negs: &self.negs[n * self.num_negatives..(n + 1) * self.num_negatives],
                hist_items: &self.hist_items[n * self.window..(n + 1) * self.window],
                hist_mask: &self.hist_mask[n * self.window..(n + 1) * self.window],
            })
            .collect()
    }

    /// Random instance: `dim = 4`, window 3, two negatives, three examples
    /// with full, partially padded and singleton histories.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let (num_users, num_items, dim, window, num_negatives) = (3usize, 7usize, 4usize, 3usize, 2usize);
        let mut params = ModelParams::<f64>::zeros(num_users, num_items, dim);
        let big = Normal::new(0.0, 0.5).unwrap();
        let small = Normal::new(0.0, 0.3).unwrap();
        for t in Tensor::ALL {
            let dist = if matches!(t, Tensor::B1 | Tensor::B2) { &small } else { &big };
            for x in params.tensor_mut(t) {
                *x = dist.sample(rng);
            }
        }
        for r in 0..dim {
            params.proj[r * dim + r] += 1.0;
        }
        let pad = num_items as u32;
        for x in &mut params.item_emb[num_items * dim..] {
            *x = 0.0;
        }
        let lens = [3usize, 2, 1];
        let mut hist_items = Vec::new();
        let mut hist_mask = Vec::new();
        for &len in &lens {
            for k in 0..window {
                if k < len {
                    hist_items.push(rng.random_range(0..num_items as u32));
                    hist_mask.push(true);
                } else {
                    hist_items.push(pad);
                    hist_mask.push(false);
                }
            }
        }
        GradInstance {
            params,
            users: vec![0, 1, 2],
            pos: (0..3).map(|_| rng.random_range(0..num_items as u32)).collect(),
            negs: (0..3 * num_negatives)
                .map(|_| rng.random_range(0..num_items as u32))
                .collect(),
            num_negatives,
            hist_items,
            hist_mask,
            window,
        }
    }
}

/// Mean batch loss, forward pass only.
pub fn batch_loss(
    params: &ModelParams<f64>,
    enc: &EncoderConfig,
    loss_cfg: &LossConfig,
    examples: &[Example<'_>],
) -> f64 {
    let tape = forward_batch(params, enc, examples);
    let total: f64 = tape
        .examples
        .iter()
        .map(|t| {
            loss::evaluate(loss_cfg, *t.pos_score(), t.neg_scores())
                .expect("instance has negatives")
                .loss
        })
        .sum();
    total / examples.len() as f64
}

/// Analytic gradient of [`batch_loss`].
pub fn analytic_grads(
    params: &ModelParams<f64>,
    enc: &EncoderConfig,
    loss_cfg: &LossConfig,
    examples: &[Example<'_>],
) -> ParamGrads<f64> {
    let tape = forward_batch(params, enc, examples);
    let scale = 1.0 / examples.len() as f64;
    let dscores: Vec<Vec<f64>> = tape
        .examples
        .iter()
        .map(|t| {
            let lv = loss::evaluate(loss_cfg, *t.pos_score(), t.neg_scores())
                .expect("instance has negatives");
            std::iter::once(lv.d_pos)
                .chain(lv.d_negs)
                .map(|d| d * scale)
                .collect()
        })
        .collect();
    backward(params, enc, examples, &tape, &dscores).expect("tape from the same batch")
}

/// Whether any score sits within `tol` of a loss kink.
fn near_kink(enc: &EncoderConfig, loss_cfg: &LossConfig, inst: &GradInstance, tol: f64) -> bool {
    let examples = inst.examples();
    let tape = forward_batch(&inst.params, enc, &examples);
    tape.examples.iter().any(|t| {
        let pos = *t.pos_score();
        t.neg_scores().iter().any(|&y| match loss_cfg.kind {
            LossKind::Ccl => (y - loss_cfg.margin).abs() < tol,
            LossKind::Phl => (loss_cfg.margin - pos + y).abs() < tol,
            _ => false,
        })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub tensor: Tensor,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub aggregation: Aggregation,
    pub similarity: Similarity,
    pub loss: LossKind,
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> &TensorCheck {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("at least one tensor")
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().max_rel_error
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    /// Tensors whose error exceeds the tolerance.
    pub fn failing(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !(t.max_rel_error < self.tolerance))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.worst();
        write!(
            f,
            "{:<4} {:<15} {:<6} {:<4} max_rel_err={:.3e} worst={}[{}]",
            if self.passed() { "PASS" } else { "FAIL" },
            self.aggregation.name(),
            self.similarity.name(),
            self.loss.name(),
            w.max_rel_error,
            w.tensor,
            w.worst_index
        )
    }
}

/// Fault hook applied to the analytic gradients before comparison.
pub type GradFault<'a> = &'a dyn Fn(&mut ParamGrads<f64>);

/// Compare analytic and finite-difference gradients for one configuration
/// on a random instance drawn from `seed`.
pub fn grad_check(
    aggregation: Aggregation,
    similarity: Similarity,
    loss_kind: LossKind,
    seed: u64,
    step: f64,
    tolerance: f64,
    fault: Option<GradFault<'_>>,
) -> Result<GradCheckReport, VerifyError> {
    let enc = EncoderConfig {
        aggregation,
        g: 0.5,
        similarity,
        cosine_eps: 1e-12,
        exclude_target: false,
    };
    let loss_cfg = LossConfig {
        kind: loss_kind,
        margin: if loss_kind == LossKind::Phl { 0.2 } else { 0.3 },
        negative_weight: 3.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = loop {
        let inst = GradInstance::random(&mut rng);
        if !near_kink(&enc, &loss_cfg, &inst, 10.0 * step) {
            break inst;
        }
    };
    let examples = inst.examples();
    let mut analytic = analytic_grads(&inst.params, &enc, &loss_cfg, &examples);
    if let Some(fault) = fault {
        fault(&mut analytic);
    }
    let numeric = finite_diff_params(|p| batch_loss(p, &enc, &loss_cfg, &examples), &inst.params, step)?;
    let tensors = Tensor::ALL
        .iter()
        .map(|&t| {
            let (worst_index, max_rel_error) = analytic
                .tensor(t)
                .iter()
                .zip(numeric.tensor(t))
                .map(|(&a, &f)| relative_error(a, f))
                .enumerate()
                .fold((0, 0.0f64), |best, (i, e)| {
                    if e > best.1 || e.is_nan() {
                        (i, e)
                    } else {
                        best
                    }
                });
            TensorCheck {
                tensor: t,
                max_rel_error,
                worst_index,
            }
        })
        .collect();
    Ok(GradCheckReport {
        aggregation,
        similarity,
        loss: loss_kind,
        tensors,
        tolerance,
    })
}

/// Every aggregation x loss x similarity combination (36 reports).
pub fn grad_check_all(
    seed: u64,
    step: f64,
    tolerance: f64,
    fault: Option<GradFault<'_>>,
) -> Result<Vec<GradCheckReport>, VerifyError> {
    let mut out = Vec::with_capacity(36);
    let mut n = 0u64;
    for aggregation in Aggregation::ALL {
        for loss_kind in LossKind::ALL {
            for similarity in Similarity::ALL {
                out.push(grad_check(
                    aggregation,
                    similarity,
                    loss_kind,
                    seed.wrapping_add(n),
                    step,
                    tolerance,
                    fault,
                )?);
                n += 1;
            }
        }
    }
    Ok(out)
}

/// Straight-line reference: fully sort each user's candidates, then count.
///
/// Returns `(recall, ndcg, precision, f1)` per cutoff in `ks` order and the
/// number of evaluated users.
pub fn reference_metrics(
    scores: &[Vec<f32>],
    exclude: &[Vec<u32>],
    test: &[Vec<u32>],
    ks: &[usize],
) -> (Vec<[f64; 4]>, usize) {
    let mut sums = vec![[0.0f64; 4]; ks.len()];
    let mut users = 0usize;
    for u in 0..scores.len() {
        if test[u].is_empty() {
            continue;
        }
        users += 1;
        let mut order: Vec<usize> = (0..scores[u].len()).collect();
        let key = |i: usize| -> f32 {
            if exclude[u].contains(&(i as u32)) {
                f32::NEG_INFINITY
            } else {
                scores[u][i]
            }
        };
        // Stable sort keeps ascending index among equal scores.
        order.sort_by(|&a, &b| key(b).partial_cmp(&key(a)).unwrap());
        for (ki, &k) in ks.iter().enumerate() {
            let mut hits = 0.0;
            let mut dcg = 0.0;
            for r in 0..k.min(order.len()) {
                if test[u].contains(&(order[r] as u32)) {
                    hits += 1.0;
                    dcg += 1.0 / ((r + 2) as f64).log2();
                }
            }
            let mut idcg = 0.0;
            for r in 0..k.min(test[u].len()) {
                idcg += 1.0 / ((r + 2) as f64).log2();
            }
            let recall = hits / test[u].len() as f64;
            let precision = hits / k as f64;
            let f1 = if recall + precision > 0.0 {
                2.0 * recall * precision / (recall + precision)
            } else {
                0.0
            };
            sums[ki][0] += recall;
            sums[ki][1] += dcg / idcg;
            sums[ki][2] += precision;
            sums[ki][3] += f1;
        }
    }
    for s in &mut sums {
        for v in s.iter_mut() {
            *v /= users as f64;
        }
    }
    (sums, users)
}
