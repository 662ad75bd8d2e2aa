//! The SimpleX interaction encoder.
//!
//! A user is represented by fusing their ID embedding with an aggregate of
//! the items in their history window:
//!
//! ```text
//! p_u = sum_k mask_k * alpha_k * e_k
//! h_u = g * e_u + (1 - g) * V p_u
//! y_ui = sim(h_u, e_i)
//! ```
//!
//! `alpha` is uniform over unmasked slots for average pooling, or a masked
//! softmax over `beta_k = q . tanh(W1 e_k + b1)` (self-attention) or
//! `beta_k = e_u . tanh(W2 e_k + b2)` (user-attention). With `g = 1` the
//! aggregation path is skipped entirely and the model is plain matrix
//! factorization.
//!
//! Everything here is generic over the float width. Training runs in `f32`;
//! the gradient checker instantiates the same code with `f64`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Float types the encoder can be instantiated with.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Send + Sync + fmt::Debug + fmt::Display + Default + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("float literal")
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[inline]
pub(crate) fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("fusion weight g must lie in [0, 1], got {0}")]
    InvalidGate(f64),
    #[error("cosine_eps must be positive, got {0}")]
    InvalidEps(f64),
    #[error("tape holds {tape} examples but the batch has {batch}")]
    TapeMismatch { tape: usize, batch: usize },
    #[error("example {example}: expected {expected} score gradients, got {got}")]
    ScoreGradMismatch {
        example: usize,
        expected: usize,
        got: usize,
    },
    #[error("user-attention needs a user embedding, which inductive inference does not have")]
    NoUserQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    AveragePooling,
    SelfAttention,
    UserAttention,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [
        Aggregation::AveragePooling,
        Aggregation::SelfAttention,
        Aggregation::UserAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::AveragePooling => "average_pooling",
            Aggregation::SelfAttention => "self_attention",
            Aggregation::UserAttention => "user_attention",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl FromStr for Aggregation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "average_pooling" | "avg" | "mean" => Ok(Aggregation::AveragePooling),
            "self_attention" | "self_attn" => Ok(Aggregation::SelfAttention),
            "user_attention" | "user_attn" => Ok(Aggregation::UserAttention),
            _ => Err(format!(
                "unknown aggregation {s:?} (expected average_pooling, self_attention or user_attention)"
            )),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Cosine,
    Dot,
}

impl Similarity {
    pub const ALL: [Similarity; 2] = [Similarity::Cosine, Similarity::Dot];

    pub fn name(self) -> &'static str {
        match self {
            Similarity::Cosine => "cosine",
            Similarity::Dot => "dot",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl FromStr for Similarity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cosine" | "cos" => Ok(Similarity::Cosine),
            "dot" => Ok(Similarity::Dot),
            _ => Err(format!("unknown similarity {s:?} (expected cosine or dot)")),
        }
    }
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub aggregation: Aggregation,
    /// Weight of the ID embedding in the fused user vector.
    pub g: f64,
    pub similarity: Similarity,
    pub cosine_eps: f64,
    /// Drop the target positive from its own history window during training.
    pub exclude_target: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            aggregation: Aggregation::AveragePooling,
            g: 0.5,
            similarity: Similarity::Cosine,
            cosine_eps: 1e-12,
            exclude_target: false,
        }
    }
}

impl EncoderConfig {
    /// Matrix factorization: the ID embedding alone.
    pub fn mf(similarity: Similarity) -> Self {
        EncoderConfig {
            g: 1.0,
            similarity,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if !(0.0..=1.0).contains(&self.g) {
            return Err(EncoderError::InvalidGate(self.g));
        }
        if !(self.cosine_eps > 0.0) {
            return Err(EncoderError::InvalidEps(self.cosine_eps));
        }
        Ok(())
    }

    /// Whether the history path contributes to `h_u` at all.
    pub fn uses_history(&self) -> bool {
        self.g < 1.0
    }
}

/// Names the parameter tensors, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tensor {
    UserEmb,
    ItemEmb,
    Proj,
    Query,
    W1,
    B1,
    W2,
    B2,
}

impl Tensor {
    pub const ALL: [Tensor; 8] = [
        Tensor::UserEmb,
        Tensor::ItemEmb,
        Tensor::Proj,
        Tensor::Query,
        Tensor::W1,
        Tensor::B1,
        Tensor::W2,
        Tensor::B2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::UserEmb => "user_emb",
            Tensor::ItemEmb => "item_emb",
            Tensor::Proj => "V",
            Tensor::Query => "q",
            Tensor::W1 => "W1",
            Tensor::B1 => "b1",
            Tensor::W2 => "W2",
            Tensor::B2 => "b2",
        }
    }

    pub fn is_embedding(self) -> bool {
        matches!(self, Tensor::UserEmb | Tensor::ItemEmb)
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// All learnable state. Matrices are row-major `dim x dim`.
///
/// `item_emb` has `num_items + 1` rows; the last one is the padding row and
/// stays zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub dim: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub user_emb: Vec<T>,
    pub item_emb: Vec<T>,
    pub proj: Vec<T>,
    pub query: Vec<T>,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

/// Dense gradients share the parameter layout.
pub type ParamGrads<T> = ModelParams<T>;

impl<T: Real> ModelParams<T> {
    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        ModelParams {
            dim,
            num_users,
            num_items,
            user_emb: vec![T::zero(); num_users * dim],
            item_emb: vec![T::zero(); (num_items + 1) * dim],
            proj: vec![T::zero(); dim * dim],
            query: vec![T::zero(); dim],
            w1: vec![T::zero(); dim * dim],
            b1: vec![T::zero(); dim],
            w2: vec![T::zero(); dim * dim],
            b2: vec![T::zero(); dim],
        }
    }

    /// Embeddings and attention matrices ~ N(0, 0.01^2), `V = I`, biases and
    /// query zero.
    pub fn init<R: Rng + ?Sized>(num_users: usize, num_items: usize, dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(num_users, num_items, dim);
        let normal = Normal::new(0.0f64, 1e-2).unwrap();
        let mut fill = |v: &mut [T]| {
            for x in v {
                *x = lit(normal.sample(rng));
            }
        };
        fill(&mut p.user_emb);
        fill(&mut p.item_emb[..num_items * dim]);
        fill(&mut p.w1);
        fill(&mut p.w2);
        for r in 0..dim {
            p.proj[r * dim + r] = T::one();
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.num_users, self.num_items, self.dim)
    }

    pub fn pad_row(&self) -> usize {
        self.num_items
    }

    pub fn user(&self, u: usize) -> &[T] {
        &self.user_emb[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item(&self, i: usize) -> &[T] {
        &self.item_emb[i * self.dim..(i + 1) * self.dim]
    }

    pub fn tensor(&self, t: Tensor) -> &[T] {
        match t {
            Tensor::UserEmb => &self.user_emb,
            Tensor::ItemEmb => &self.item_emb,
            Tensor::Proj => &self.proj,
            Tensor::Query => &self.query,
            Tensor::W1 => &self.w1,
            Tensor::B1 => &self.b1,
            Tensor::W2 => &self.w2,
            Tensor::B2 => &self.b2,
        }
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [T] {
        match t {
            Tensor::UserEmb => &mut self.user_emb,
            Tensor::ItemEmb => &mut self.item_emb,
            Tensor::Proj => &mut self.proj,
            Tensor::Query => &mut self.query,
            Tensor::W1 => &mut self.w1,
            Tensor::B1 => &mut self.b1,
            Tensor::W2 => &mut self.w2,
            Tensor::B2 => &mut self.b2,
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let c = |v: &[T]| -> Vec<U> { v.iter().map(|&x| U::from(x).unwrap()).collect() };
        ModelParams {
            dim: self.dim,
            num_users: self.num_users,
            num_items: self.num_items,
            user_emb: c(&self.user_emb),
            item_emb: c(&self.item_emb),
            proj: c(&self.proj),
            query: c(&self.query),
            w1: c(&self.w1),
            b1: c(&self.b1),
            w2: c(&self.w2),
            b2: c(&self.b2),
        }
    }

    pub fn all_finite(&self) -> bool {
        Tensor::ALL
            .iter()
            .all(|&t| self.tensor(t).iter().all(|x| x.is_finite()))
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) {
        for t in Tensor::ALL {
            for (a, &b) in self.tensor_mut(t).iter_mut().zip(other.tensor(t)) {
                *a = *a + b;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in Tensor::ALL {
            for a in self.tensor_mut(t) {
                *a = *a * s;
            }
        }
    }

    pub fn fill_zero(&mut self) {
        for t in Tensor::ALL {
            for a in self.tensor_mut(t) {
                *a = T::zero();
            }
        }
    }
}

/// Output of the aggregation layer for one history window.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated<T> {
    pub pooled: Vec<T>,
    /// Aggregation weight per slot; zero on masked slots.
    pub alpha: Vec<T>,
    /// `tanh(W e_k + b)` per slot (`K x dim`), attention modes only.
    pub hidden: Vec<T>,
    /// Slots that actually contributed.
    pub active: Vec<bool>,
}

/// Pool the history window into `p_u`.
///
/// `user` is the user-attention query; it is ignored by the other modes.
/// A window with no active slot yields `p_u = 0`.
pub fn aggregate<T: Real>(
    items: &[u32],
    active: &[bool],
    params: &ModelParams<T>,
    aggregation: Aggregation,
    user: Option<&[T]>,
) -> Result<Aggregated<T>, EncoderError> {
    let d = params.dim;
    let k_len = items.len();
    let mut pooled = vec![T::zero(); d];
    let mut alpha = vec![T::zero(); k_len];
    let mut hidden = Vec::new();
    let count = active.iter().filter(|&&a| a).count();
    if count == 0 {
        return Ok(Aggregated {
            pooled,
            alpha,
            hidden,
            active: active.to_vec(),
        });
    }
    match aggregation {
        Aggregation::AveragePooling => {
            let w = T::one() / lit(count as f64);
            for k in 0..k_len {
                if active[k] {
                    alpha[k] = w;
                }
            }
        }
        Aggregation::SelfAttention | Aggregation::UserAttention => {
            let (mat, bias, query): (&[T], &[T], &[T]) = match aggregation {
                Aggregation::SelfAttention => (&params.w1, &params.b1, &params.query),
                _ => (&params.w2, &params.b2, user.ok_or(EncoderError::NoUserQuery)?),
            };
            hidden = vec![T::zero(); k_len * d];
            let mut beta = vec![T::neg_infinity(); k_len];
            for k in 0..k_len {
                if !active[k] {
                    continue;
                }
                let e = params.item(items[k] as usize);
                let t = &mut hidden[k * d..(k + 1) * d];
                for r in 0..d {
                    t[r] = (dot(&mat[r * d..(r + 1) * d], e) + bias[r]).tanh();
                }
                beta[k] = dot(query, t);
            }
            let max = beta
                .iter()
                .zip(active)
                .filter(|(_, &a)| a)
                .map(|(&b, _)| b)
                .fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for k in 0..k_len {
                if active[k] {
                    alpha[k] = (beta[k] - max).exp();
                    denom = denom + alpha[k];
                }
            }
            for a in &mut alpha {
                *a = *a / denom;
            }
        }
    }
    for k in 0..k_len {
        if active[k] {
            axpy(alpha[k], params.item(items[k] as usize), &mut pooled);
        }
    }
    Ok(Aggregated {
        pooled,
        alpha,
        hidden,
        active: active.to_vec(),
    })
}

/// `h_u = g e_u + (1 - g) V p_u`.
pub fn fuse<T: Real>(user: &[T], pooled: &[T], params: &ModelParams<T>, g: f64) -> Vec<T> {
    let d = params.dim;
    let g_t: T = lit(g);
    let rest = T::one() - g_t;
    (0..d)
        .map(|r| {
            let vp = if g < 1.0 {
                dot(&params.proj[r * d..(r + 1) * d], pooled)
            } else {
                T::zero()
            };
            g_t * user[r] + rest * vp
        })
        .collect()
}

/// Similarity between a user representation and an item embedding.
pub fn score<T: Real>(h: &[T], item: &[T], similarity: Similarity, eps: f64) -> T {
    match similarity {
        Similarity::Dot => dot(h, item),
        Similarity::Cosine => {
            let eps: T = lit(eps);
            dot(h, item) / (norm(h).max(eps) * norm(item).max(eps))
        }
    }
}

/// One training example: a user, a positive, its negatives and the user's
/// history window.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub user: u32,
    pub pos: u32,
    pub negs: &'a [u32],
    pub hist_items: &'a [u32],
    pub hist_mask: &'a [bool],
}

impl Example<'_> {
    /// Positive first, then negatives.
    pub fn targets(&self) -> impl Iterator<Item = u32> + '_ {
        std::iter::once(self.pos).chain(self.negs.iter().copied())
    }

    pub fn num_targets(&self) -> usize {
        1 + self.negs.len()
    }
}

/// Forward intermediates for one example.
#[derive(Debug, Clone)]
pub struct ExampleTape<T> {
    pub agg: Option<Aggregated<T>>,
    pub h: Vec<T>,
    /// Scores for the positive followed by each negative.
    pub scores: Vec<T>,
}

impl<T> ExampleTape<T> {
    pub fn pos_score(&self) -> &T {
        &self.scores[0]
    }

    pub fn neg_scores(&self) -> &[T] {
        &self.scores[1..]
    }
}

/// Forward intermediates for a batch, one entry per example.
#[derive(Debug, Clone)]
pub struct ForwardTape<T> {
    pub examples: Vec<ExampleTape<T>>,
}

fn active_slots(ex: &Example<'_>, cfg: &EncoderConfig) -> Vec<bool> {
    ex.hist_mask
        .iter()
        .zip(ex.hist_items)
        .map(|(&m, &i)| m && !(cfg.exclude_target && i == ex.pos))
        .collect()
}

/// User representation from an ID embedding and a history window.
pub fn user_representation<T: Real>(
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
    user: usize,
    hist_items: &[u32],
    hist_mask: &[bool],
) -> Vec<T> {
    let e_u = params.user(user);
    if !cfg.uses_history() {
        return e_u.to_vec();
    }
    let agg = aggregate(hist_items, hist_mask, params, cfg.aggregation, Some(e_u))
        .expect("user query supplied");
    fuse(e_u, &agg.pooled, params, cfg.g)
}

pub fn forward_example<T: Real>(
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
    ex: &Example<'_>,
) -> ExampleTape<T> {
    let e_u = params.user(ex.user as usize);
    let (agg, h) = if cfg.uses_history() {
        let active = active_slots(ex, cfg);
        let agg = aggregate(ex.hist_items, &active, params, cfg.aggregation, Some(e_u))
            .expect("user query supplied");
        let h = fuse(e_u, &agg.pooled, params, cfg.g);
        (Some(agg), h)
    } else {
        (None, e_u.to_vec())
    };
    let scores = ex
        .targets()
        .map(|i| score(&h, params.item(i as usize), cfg.similarity, cfg.cosine_eps))
        .collect();
    ExampleTape { agg, h, scores }
}

pub fn forward_batch<T: Real>(
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
    examples: &[Example<'_>],
) -> ForwardTape<T> {
    ForwardTape {
        examples: examples.iter().map(|ex| forward_example(params, cfg, ex)).collect(),
    }
}

/// Gradient rows keyed by table index, stored contiguously in first-touch order.
#[derive(Debug, Clone)]
pub struct RowGrads<T> {
    dim: usize,
    slot: HashMap<u32, usize>,
    rows: Vec<u32>,
    data: Vec<T>,
}

impl<T: Real> RowGrads<T> {
    pub fn new(dim: usize) -> Self {
        RowGrads {
            dim,
            slot: HashMap::new(),
            rows: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn row_mut(&mut self, row: u32) -> &mut [T] {
        let d = self.dim;
        let idx = match self.slot.get(&row) {
            Some(&i) => i,
            None => {
                let i = self.rows.len();
                self.slot.insert(row, i);
                self.rows.push(row);
                self.data.extend(std::iter::repeat_n(T::zero(), d));
                i
            }
        };
        &mut self.data[idx * d..(idx + 1) * d]
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[T])> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, &r)| (r, &self.data[i * self.dim..(i + 1) * self.dim]))
    }

    pub fn scatter_add(&self, dense: &mut [T]) {
        for (r, g) in self.iter() {
            let dst = &mut dense[r as usize * self.dim..(r as usize + 1) * self.dim];
            for (a, &b) in dst.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
    }
}

/// Gradients with sparse embedding tables, used while accumulating a chunk
/// of examples.
#[derive(Debug, Clone)]
pub struct SparseGrads<T> {
    pub users: RowGrads<T>,
    pub items: RowGrads<T>,
    pub proj: Vec<T>,
    pub query: Vec<T>,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

impl<T: Real> SparseGrads<T> {
    pub fn new(dim: usize) -> Self {
        SparseGrads {
            users: RowGrads::new(dim),
            items: RowGrads::new(dim),
            proj: vec![T::zero(); dim * dim],
            query: vec![T::zero(); dim],
            w1: vec![T::zero(); dim * dim],
            b1: vec![T::zero(); dim],
            w2: vec![T::zero(); dim * dim],
            b2: vec![T::zero(); dim],
        }
    }

    pub fn scatter_add(&self, dense: &mut ParamGrads<T>) {
        self.users.scatter_add(&mut dense.user_emb);
        self.items.scatter_add(&mut dense.item_emb);
        let add = |dst: &mut [T], src: &[T]| {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a = *a + b;
            }
        };
        add(&mut dense.proj, &self.proj);
        add(&mut dense.query, &self.query);
        add(&mut dense.w1, &self.w1);
        add(&mut dense.b1, &self.b1);
        add(&mut dense.w2, &self.w2);
        add(&mut dense.b2, &self.b2);
    }
}

/// d score / d h and d score / d e for one (user, item) pair, accumulated
/// with weight `w` into `dh` and `de`.
fn score_backward<T: Real>(
    h: &[T],
    item: &[T],
    s: T,
    w: T,
    similarity: Similarity,
    eps: T,
    dh: &mut [T],
    de: &mut [T],
) {
    match similarity {
        Similarity::Dot => {
            axpy(w, item, dh);
            axpy(w, h, de);
        }
        Similarity::Cosine => {
            let nh_raw = norm(h);
            let ne_raw = norm(item);
            let nh = nh_raw.max(eps);
            let ne = ne_raw.max(eps);
            let inv = w / (nh * ne);
            axpy(inv, item, dh);
            axpy(inv, h, de);
            // The norm only depends on the vector above the clamp.
            if nh_raw > eps {
                axpy(-w * s / (nh * nh), h, dh);
            }
            if ne_raw > eps {
                axpy(-w * s / (ne * ne), item, de);
            }
        }
    }
}

/// Accumulate the gradient of `sum_c dscores[c] * score_c` for one example.
pub fn backward_example<T: Real>(
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
    ex: &Example<'_>,
    tape: &ExampleTape<T>,
    dscores: &[T],
    grads: &mut SparseGrads<T>,
) {
    let d = params.dim;
    let eps: T = lit(cfg.cosine_eps);
    let mut dh = vec![T::zero(); d];
    for ((c, item), &w) in ex.targets().enumerate().zip(dscores) {
        if w == T::zero() {
            continue;
        }
        let de = grads.items.row_mut(item);
        score_backward(
            &tape.h,
            params.item(item as usize),
            tape.scores[c],
            w,
            cfg.similarity,
            eps,
            &mut dh,
            de,
        );
    }
    if dh.iter().all(|&x| x == T::zero()) {
        return;
    }

    let g: T = lit(cfg.g);
    let user = ex.user;
    let e_u = params.user(user as usize);
    {
        let du = grads.users.row_mut(user);
        axpy(g, &dh, du);
    }
    let Some(agg) = tape.agg.as_ref() else {
        return;
    };

    // h = g e_u + (1 - g) V p
    let dv: Vec<T> = dh.iter().map(|&x| (T::one() - g) * x).collect();
    let mut dp = vec![T::zero(); d];
    for r in 0..d {
        let row = &mut grads.proj[r * d..(r + 1) * d];
        axpy(dv[r], &agg.pooled, row);
        axpy(dv[r], &params.proj[r * d..(r + 1) * d], &mut dp);
    }

    // p = sum_k alpha_k e_k
    let k_len = ex.hist_items.len();
    let mut dalpha = vec![T::zero(); k_len];
    for k in 0..k_len {
        if !agg.active[k] {
            continue;
        }
        let item = ex.hist_items[k];
        dalpha[k] = dot(params.item(item as usize), &dp);
        axpy(agg.alpha[k], &dp, grads.items.row_mut(item));
    }
    if cfg.aggregation == Aggregation::AveragePooling {
        return;
    }

    // Softmax Jacobian over the active slots.
    let mean = (0..k_len)
        .filter(|&k| agg.active[k])
        .fold(T::zero(), |acc, k| acc + agg.alpha[k] * dalpha[k]);
    let (mat, query_is_user) = match cfg.aggregation {
        Aggregation::SelfAttention => (&params.w1, false),
        _ => (&params.w2, true),
    };
    let query: &[T] = if query_is_user { e_u } else { &params.query };
    let mut dquery = vec![T::zero(); d];
    for k in 0..k_len {
        if !agg.active[k] {
            continue;
        }
        let dbeta = agg.alpha[k] * (dalpha[k] - mean);
        let t = &agg.hidden[k * d..(k + 1) * d];
        axpy(dbeta, t, &mut dquery);
        let dz: Vec<T> = (0..d)
            .map(|r| dbeta * query[r] * (T::one() - t[r] * t[r]))
            .collect();
        let item = ex.hist_items[k];
        let e_k = params.item(item as usize);
        let (dmat, dbias) = if query_is_user {
            (&mut grads.w2, &mut grads.b2)
        } else {
            (&mut grads.w1, &mut grads.b1)
        };
        for r in 0..d {
            axpy(dz[r], e_k, &mut dmat[r * d..(r + 1) * d]);
            dbias[r] = dbias[r] + dz[r];
        }
        let de = grads.items.row_mut(item);
        for r in 0..d {
            axpy(dz[r], &mat[r * d..(r + 1) * d], de);
        }
    }
    if query_is_user {
        axpy(T::one(), &dquery, grads.users.row_mut(user));
    } else {
        axpy(T::one(), &dquery, &mut grads.query);
    }
}

/// Dense gradients of `sum_n sum_c dscores[n][c] * score[n][c]` over a batch.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
    examples: &[Example<'_>],
    tape: &ForwardTape<T>,
    dscores: &[Vec<T>],
) -> Result<ParamGrads<T>, EncoderError> {
    if tape.examples.len() != examples.len() || dscores.len() != examples.len() {
        return Err(EncoderError::TapeMismatch {
            tape: tape.examples.len().min(dscores.len()),
            batch: examples.len(),
        });
    }
    let mut sparse = SparseGrads::new(params.dim);
    for (n, ((ex, t), ds)) in examples.iter().zip(&tape.examples).zip(dscores).enumerate() {
        if ds.len() != ex.num_targets() || t.scores.len() != ex.num_targets() {
            return Err(EncoderError::ScoreGradMismatch {
                example: n,
                expected: ex.num_targets(),
                got: ds.len(),
            });
        }
        backward_example(params, cfg, ex, t, ds, &mut sparse);
    }
    let mut dense = params.zeros_like();
    sparse.scatter_add(&mut dense);
    Ok(dense)
}
