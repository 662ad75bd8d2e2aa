//! Mini-batch training loop, validation holdout, early stopping and
//! inductive (history-only) user inference.

mod adam;

pub use adam::{adam_step, first_non_finite, AdamConfig, AdamState};

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{build_histories, DatasetError, HeldoutUsers, HistoryTable, InteractionDataset};
use crate::encoder::{
    aggregate, backward_example, forward_example, fuse, Aggregation, EncoderConfig, EncoderError,
    ModelParams, ParamGrads, SparseGrads, Tensor,
};
use crate::loss::{self, LossConfig, LossError};
use crate::metrics::{self, MetricReport, MetricsError};
use crate::par;
use crate::sampler::{make_epoch_batches, stream_rng, SamplerConfig, SamplerError, TrainBatch};

/// Cutoff used for model selection.
pub const SELECTION_K: usize = 20;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("epoch {epoch}, batch {batch}: non-finite {what}; step aborted")]
    NonFinite {
        epoch: usize,
        batch: usize,
        what: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Transductive,
    /// Users are represented by their history only (`g = 0`).
    StrongGeneralization,
}

impl FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "transductive" => Ok(TrainMode::Transductive),
            "strong_generalization" => Ok(TrainMode::StrongGeneralization),
            _ => Err(format!(
                "unknown mode {s:?} (expected transductive or strong_generalization)"
            )),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Transductive => "transductive",
            TrainMode::StrongGeneralization => "strong_generalization",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping.
    pub early_stop_patience: usize,
    pub eval_every: usize,
    pub mode: TrainMode,
    /// Share of each user's training positives held out for model selection.
    pub validation_fraction: f64,
    /// Cutoffs reported in the log; `SELECTION_K` is always included.
    pub eval_ks: Vec<usize>,
    /// Examples per gradient chunk. Chunks are reduced in order, so this (not
    /// the thread count) fixes the summation order.
    pub chunk_size: usize,
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 1024,
            max_epochs: 100,
            early_stop_patience: 10,
            eval_every: 1,
            mode: TrainMode::Transductive,
            validation_fraction: 0.1,
            eval_ks: vec![SELECTION_K],
            chunk_size: 64,
            verbose: false,
        }
    }
}

/// Everything that defines the model being trained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub dim: usize,
}

impl ModelConfig {
    pub fn validate(&self, mode: TrainMode) -> Result<(), TrainError> {
        self.encoder.validate()?;
        if self.dim == 0 {
            return Err(TrainError::Config("model.dim must be at least 1".into()));
        }
        if mode == TrainMode::StrongGeneralization {
            if self.encoder.g != 0.0 {
                return Err(TrainError::Config(
                    "strong_generalization requires model.g = 0".into(),
                ));
            }
            if self.encoder.aggregation == Aggregation::UserAttention {
                return Err(TrainError::Config(
                    "strong_generalization cannot use user_attention (no user embedding)".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid: Option<MetricReport>,
    /// Best validation Recall@20 seen so far.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_recall: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())
    }

    pub fn best_recall(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|r| r.best_recall)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the best validation Recall@20 (the final parameters if
    /// no validation ran).
    pub best: ModelParams<f32>,
    pub last: ModelParams<f32>,
    pub log: TrainLog,
}

/// Hold out `fraction` of each user's training positives (at least one item
/// stays in training). Returns the reduced training sequences and the
/// held-out sets.
pub fn holdout_split(
    ds: &InteractionDataset,
    fraction: f64,
    seed: u64,
) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let mut train = Vec::with_capacity(ds.num_users);
    let mut valid = Vec::with_capacity(ds.num_users);
    for (u, seq) in ds.train_seq.iter().enumerate() {
        let n = seq.len();
        let n_val = if n < 2 {
            0
        } else {
            ((n as f64 * fraction).round() as usize).min(n - 1)
        };
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream_rng(seed, u64::MAX - 1, u as u64));
        let mut held = vec![false; n];
        for &i in &idx[..n_val] {
            held[i] = true;
        }
        train.push(seq.iter().zip(&held).filter(|(_, &h)| !h).map(|(&i, _)| i).collect());
        let mut v: Vec<u32> = seq.iter().zip(&held).filter(|(_, &h)| h).map(|(&i, _)| i).collect();
        v.sort_unstable();
        valid.push(v);
    }
    (train, valid)
}

/// Mean loss and summed gradients of one batch.
///
/// Examples are processed in fixed-size chunks (possibly in parallel); chunk
/// results are added in chunk order.
pub fn batch_gradients(
    params: &ModelParams<f32>,
    enc: &EncoderConfig,
    loss_cfg: &LossConfig,
    batch: &TrainBatch,
    ht: &HistoryTable,
    chunk_size: usize,
    grads: &mut ParamGrads<f32>,
) -> Result<f64, LossError> {
    let examples = batch.examples(ht);
    let scale = 1.0f32 / batch.len() as f32;
    let chunks = par::map_chunks(&examples, chunk_size, |_, chunk| {
        let mut sg = SparseGrads::new(params.dim);
        let mut loss_sum = 0.0f64;
        let mut dscores = Vec::new();
        for ex in chunk {
            let tape = forward_example(params, enc, ex);
            let lv = loss::evaluate(loss_cfg, *tape.pos_score(), tape.neg_scores())?;
            loss_sum += lv.loss as f64;
            dscores.clear();
            dscores.push(lv.d_pos * scale);
            dscores.extend(lv.d_negs.iter().map(|&d| d * scale));
            backward_example(params, enc, ex, &tape, &dscores, &mut sg);
        }
        Ok((sg, loss_sum))
    });
    grads.fill_zero();
    let mut total = 0.0f64;
    for chunk in chunks {
        let (sg, l) = chunk?;
        sg.scatter_add(grads);
        total += l;
    }
    Ok(total / batch.len() as f64)
}

/// Train with Adam, selecting the snapshot with the best validation
/// Recall@20.
///
/// When `validation_fraction > 0`, a seeded per-user holdout is carved out of
/// the training positives and histories are rebuilt from what remains, with
/// the window of `ht`. The test split of `ds` is never read.
pub fn train(
    ds: &InteractionDataset,
    ht: &HistoryTable,
    model: &ModelConfig,
    loss_cfg: &LossConfig,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    model.validate(cfg.mode)?;
    loss_cfg.validate()?;
    sampler.validate()?;
    if !(cfg.adam.learning_rate > 0.0) {
        return Err(TrainError::Config("learning_rate must be positive".into()));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Sampler(SamplerError::ZeroBatch));
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(TrainError::Config("validation_fraction must be in [0, 1)".into()));
    }

    let mut params: ModelParams<f32> = ModelParams::init(
        ds.num_users,
        ds.num_items,
        model.dim,
        &mut stream_rng(sampler.seed, u64::MAX - 2, 0),
    );
    let mut log = TrainLog::default();
    if cfg.max_epochs == 0 {
        return Ok(TrainOutcome {
            best: params.clone(),
            last: params,
            log,
        });
    }

    let (fit_ds, fit_ht, valid) = if cfg.validation_fraction > 0.0 {
        let (train_seq, valid) = holdout_split(ds, cfg.validation_fraction, sampler.seed);
        let fit_ds = ds.with_splits(train_seq, vec![Vec::new(); ds.num_users]);
        let fit_ht = build_histories(&fit_ds, ht.window)?;
        let has_valid = valid.iter().any(|v| !v.is_empty());
        (fit_ds, fit_ht, has_valid.then_some(valid))
    } else {
        (ds.clone(), ht.clone(), None)
    };
    let mut eval_ks = cfg.eval_ks.clone();
    if !eval_ks.contains(&SELECTION_K) {
        eval_ks.push(SELECTION_K);
    }
    eval_ks.sort_unstable();
    eval_ks.dedup();

    let mut state = AdamState::new(&params);
    let mut grads = params.zeros_like();
    let mut best = params.clone();
    let mut best_recall = f64::NEG_INFINITY;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let batches = make_epoch_batches(&fit_ds, sampler, cfg.batch_size, epoch as u64)?;
        let mut loss_sum = 0.0f64;
        let mut pairs = 0usize;
        for (b, batch) in batches.enumerate() {
            let batch = batch?;
            let mean = batch_gradients(
                &params,
                &model.encoder,
                loss_cfg,
                &batch,
                &fit_ht,
                cfg.chunk_size,
                &mut grads,
            )?;
            if !mean.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    what: "loss".into(),
                });
            }
            adam_step(&mut params, &grads, &mut state, &cfg.adam).map_err(|t: Tensor| {
                TrainError::NonFinite {
                    epoch,
                    batch: b,
                    what: format!("gradient in {t}"),
                }
            })?;
            loss_sum += mean * batch.len() as f64;
            pairs += batch.len();
        }
        let mean_loss = loss_sum / pairs as f64;

        let mut record = EpochRecord {
            epoch,
            mean_loss,
            valid: None,
            best_recall: None,
        };
        let mut stop = false;
        if let Some(valid) = &valid {
            if epoch % cfg.eval_every.max(1) == 0 || epoch == cfg.max_epochs {
                let report =
                    metrics::evaluate(&params, &model.encoder, &fit_ds, &fit_ht, valid, &eval_ks)?;
                let recall = report.recall(SELECTION_K);
                if recall > best_recall {
                    best_recall = recall;
                    best.clone_from(&params);
                    log.best_epoch = Some(epoch);
                    since_best = 0;
                } else {
                    since_best += 1;
                    stop = since_best >= cfg.early_stop_patience;
                }
                record.valid = Some(report);
                record.best_recall = Some(best_recall);
            }
        }
        if cfg.verbose {
            match &record.valid {
                Some(r) => eprintln!(
                    "epoch {epoch:>4}  loss {mean_loss:.6}  valid recall@{SELECTION_K} {:.5}  ndcg@{SELECTION_K} {:.5}",
                    r.recall(SELECTION_K),
                    r.ndcg(SELECTION_K)
                ),
                None => eprintln!("epoch {epoch:>4}  loss {mean_loss:.6}"),
            }
        }
        log.epochs.push(record);
        if stop {
            log.stopped_early = true;
            break;
        }
    }
    if valid.is_none() {
        best.clone_from(&params);
        log.best_epoch = log.epochs.last().map(|r| r.epoch);
    }
    Ok(TrainOutcome {
        best,
        last: params,
        log,
    })
}

/// Representation of a user known only through `history` (`h_u = V p_u`).
///
/// The first `window` items are used. An empty history gives the zero vector.
pub fn infer_user(
    history: &[u32],
    params: &ModelParams<f32>,
    enc: &EncoderConfig,
    window: usize,
) -> Result<Vec<f32>, TrainError> {
    if enc.g != 0.0 {
        return Err(TrainError::Config(
            "history-only inference requires a model with g = 0".into(),
        ));
    }
    let window = window.max(1);
    let mut items = vec![params.num_items as u32; window];
    let mut mask = vec![false; window];
    for (k, &i) in history.iter().take(window).enumerate() {
        items[k] = i;
        mask[k] = true;
    }
    let agg = aggregate(&items, &mask, params, enc.aggregation, None)?;
    let zeros = vec![0.0f32; params.dim];
    Ok(fuse(&zeros, &agg.pooled, params, 0.0))
}

/// Full-ranking evaluation of history-only users; their history items are
/// excluded from the candidates.
pub fn evaluate_heldout(
    params: &ModelParams<f32>,
    enc: &EncoderConfig,
    window: usize,
    users: &HeldoutUsers,
    ks: &[usize],
) -> Result<MetricReport, TrainError> {
    // Surface configuration errors before fanning out.
    infer_user(&[], params, enc, window)?;
    let exclude = users.history_sorted();
    Ok(metrics::evaluate_with(
        params,
        enc,
        |u| infer_user(&users.history[u], params, enc, window).expect("validated above"),
        &exclude,
        &users.test_pos,
        ks,
    )?)
}
