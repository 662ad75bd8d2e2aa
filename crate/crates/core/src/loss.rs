//! Per-positive-pair losses over one positive score and `|N|` negative scores.
//!
//! Each function returns the loss and its derivative with respect to every
//! score; the encoder turns those into parameter gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{lit, Real, Similarity};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("the cosine contrastive loss needs at least one negative")]
    NoNegatives,
    #[error("margin {margin} out of range for {kind}")]
    InvalidMargin { kind: LossKind, margin: f64 },
    #[error("negative weight must be positive, got {0}")]
    InvalidWeight(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ccl,
    Bpr,
    Bce,
    Sce,
    Phl,
    Mse,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Bpr,
        LossKind::Phl,
        LossKind::Bce,
        LossKind::Sce,
        LossKind::Mse,
        LossKind::Ccl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ccl => "ccl",
            LossKind::Bpr => "bpr",
            LossKind::Bce => "bce",
            LossKind::Sce => "sce",
            LossKind::Phl => "phl",
            LossKind::Mse => "mse",
        }
    }

    /// Cosine for the margin losses, dot product for the rest.
    pub fn default_similarity(self) -> Similarity {
        match self {
            LossKind::Ccl | LossKind::Phl => Similarity::Cosine,
            _ => Similarity::Dot,
        }
    }
}

impl FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ccl" => Ok(LossKind::Ccl),
            "bpr" => Ok(LossKind::Bpr),
            "bce" => Ok(LossKind::Bce),
            "sce" => Ok(LossKind::Sce),
            "phl" => Ok(LossKind::Phl),
            "mse" => Ok(LossKind::Mse),
            _ => Err(format!(
                "unknown loss {s:?} (expected one of ccl, bpr, bce, sce, phl, mse)"
            )),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// CCL: similarity threshold below which negatives are ignored.
    /// PHL: distance margin.
    pub margin: f64,
    /// CCL weight of the averaged negative term.
    pub negative_weight: f64,
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        LossConfig {
            kind,
            margin: 0.4,
            negative_weight: 150.0,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let bad_margin = match self.kind {
            LossKind::Ccl => !(0.0..=1.0).contains(&self.margin),
            LossKind::Phl => !(self.margin >= 0.0) || !self.margin.is_finite(),
            _ => false,
        };
        if bad_margin {
            return Err(LossError::InvalidMargin {
                kind: self.kind,
                margin: self.margin,
            });
        }
        if self.kind == LossKind::Ccl && !(self.negative_weight > 0.0) {
            return Err(LossError::InvalidWeight(self.negative_weight));
        }
        Ok(())
    }
}

/// Loss value and its gradient with respect to each score.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub loss: T,
    pub d_pos: T,
    pub d_negs: Vec<T>,
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// `(1 - pos) + w/|N| * sum_j max(0, neg_j - m)`.
pub fn ccl<T: Real>(pos: T, negs: &[T], margin: f64, weight: f64) -> Result<LossValue<T>, LossError> {
    if negs.is_empty() {
        return Err(LossError::NoNegatives);
    }
    let m: T = lit(margin);
    let scale: T = lit(weight / negs.len() as f64);
    let mut neg_term = T::zero();
    let d_negs = negs
        .iter()
        .map(|&y| {
            if y > m {
                neg_term = neg_term + (y - m);
                scale
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(LossValue {
        loss: (T::one() - pos) + scale * neg_term,
        d_pos: -T::one(),
        d_negs,
    })
}

/// `-sum_j ln sigmoid(pos - neg_j)`.
pub fn bpr<T: Real>(pos: T, negs: &[T]) -> LossValue<T> {
    let mut loss = T::zero();
    let mut d_pos = T::zero();
    let d_negs = negs
        .iter()
        .map(|&y| {
            let x = pos - y;
            loss = loss + softplus(-x);
            let s = sigmoid(-x);
            d_pos = d_pos - s;
            s
        })
        .collect();
    LossValue { loss, d_pos, d_negs }
}

/// `-ln sigmoid(pos) - sum_j ln(1 - sigmoid(neg_j))`.
pub fn bce<T: Real>(pos: T, negs: &[T]) -> LossValue<T> {
    let mut loss = softplus(-pos);
    let d_negs = negs
        .iter()
        .map(|&y| {
            loss = loss + softplus(y);
            sigmoid(y)
        })
        .collect();
    LossValue {
        loss,
        d_pos: -sigmoid(-pos),
        d_negs,
    }
}

/// Softmax cross-entropy with the positive as the target class, written as
/// `ln(1 + sum_j exp(y_j - y_pos))` so a dominant positive keeps a positive
/// loss instead of cancelling to zero.
pub fn sce<T: Real>(pos: T, negs: &[T]) -> LossValue<T> {
    let shift = negs.iter().fold(T::zero(), |m, &y| m.max(y - pos));
    let e_negs: Vec<T> = negs.iter().map(|&y| (y - pos - shift).exp()).collect();
    let neg_sum = e_negs.iter().fold(T::zero(), |acc, &e| acc + e);
    let z = (-shift).exp() + neg_sum;
    let loss = if shift == T::zero() {
        neg_sum.ln_1p()
    } else {
        shift + z.ln()
    };
    LossValue {
        loss,
        d_pos: -neg_sum / z,
        d_negs: e_negs.into_iter().map(|e| e / z).collect(),
    }
}

/// Hinge on distances `1 - score`: `sum_j max(0, m + d_pos - d_neg_j)`.
pub fn phl<T: Real>(pos: T, negs: &[T], margin: f64) -> LossValue<T> {
    let m: T = lit(margin);
    let d_pos_dist = T::one() - pos;
    let mut loss = T::zero();
    let mut d_pos = T::zero();
    let d_negs = negs
        .iter()
        .map(|&y| {
            let v = m + d_pos_dist - (T::one() - y);
            if v > T::zero() {
                loss = loss + v;
                d_pos = d_pos - T::one();
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    LossValue { loss, d_pos, d_negs }
}

/// Squared error against 1 for the positive and 0 for negatives.
pub fn mse<T: Real>(pos: T, negs: &[T]) -> LossValue<T> {
    let two: T = lit(2.0);
    let loss = negs
        .iter()
        .fold((pos - T::one()) * (pos - T::one()), |acc, &y| acc + y * y);
    LossValue {
        loss,
        d_pos: two * (pos - T::one()),
        d_negs: negs.iter().map(|&y| two * y).collect(),
    }
}

/// Dispatch on `cfg.kind`.
pub fn evaluate<T: Real>(cfg: &LossConfig, pos: T, negs: &[T]) -> Result<LossValue<T>, LossError> {
    Ok(match cfg.kind {
        LossKind::Ccl => return ccl(pos, negs, cfg.margin, cfg.negative_weight),
        LossKind::Bpr => bpr(pos, negs),
        LossKind::Bce => bce(pos, negs),
        LossKind::Sce => sce(pos, negs),
        LossKind::Phl => phl(pos, negs, cfg.margin),
        LossKind::Mse => mse(pos, negs),
    })
}
