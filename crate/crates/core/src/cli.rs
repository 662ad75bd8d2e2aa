//! `simplex` command-line interface: train, eval, sweep and gradcheck.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{load_raw, ConfigError, ExperimentConfig, RawConfig};
use crate::dataset::{build_histories, load_heldout_users, load_interactions, DatasetError};
use crate::metrics::{self, MetricReport, MetricsError};
use crate::trainer::{self, evaluate_heldout, TrainError, TrainLog, SELECTION_K};
use crate::verify::{self, VerifyError};
use crate::{encoder::ParamGrads, par};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("dimension mismatch: checkpoint has {checkpoint} {what}, dataset has {dataset}")]
    DimensionMismatch {
        what: &'static str,
        checkpoint: usize,
        dataset: usize,
    },
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed for {0} of 36 configurations")]
    GradCheckFailed(usize),
}

impl CliError {
    /// 1 for verification or evaluation failures, 2 for bad input.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Dataset(_) | CliError::Usage(_) => 2,
            CliError::Train(TrainError::Config(_) | TrainError::Dataset(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "simplex", version, about = "Train and evaluate SimpleX / CCL recommenders")]
pub struct Cli {
    /// Worker threads; 1 gives fully deterministic runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes best.ckpt, final.ckpt and train_log.jsonl.
    Train {
        config: PathBuf,
        /// Print per-epoch progress to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Full-ranking evaluation of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        train: PathBuf,
        test: PathBuf,
        #[arg(long = "k", value_delimiter = ',', default_value = "20,50")]
        ks: Vec<usize>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per value of a single config axis.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SweepAxis {
    LossKind,
    NumNegatives,
    G,
    W,
    Aggregation,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::LossKind => "loss.kind",
            SweepAxis::NumNegatives => "sampler.num_negatives",
            SweepAxis::G => "model.g",
            SweepAxis::W => "loss.negative_weight",
            SweepAxis::Aggregation => "model.aggregation",
        }
    }
}

/// Trailing record of a training log: the selected checkpoint scored on a
/// held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub split: String,
    pub checkpoint: String,
    pub best_epoch: Option<usize>,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: TrainLog,
    pub test: MetricReport,
    pub heldout: Option<MetricReport>,
}

impl ExperimentResult {
    pub fn final_records(&self) -> Vec<FinalRecord> {
        let mut out = vec![FinalRecord {
            split: "test".into(),
            checkpoint: "best".into(),
            best_epoch: self.log.best_epoch,
            metrics: self.test.clone(),
        }];
        if let Some(h) = &self.heldout {
            out.push(FinalRecord {
                split: "heldout_users".into(),
                checkpoint: "best".into(),
                best_epoch: self.log.best_epoch,
                metrics: h.clone(),
            });
        }
        out
    }

    /// Epoch records followed by the final records, one JSON object per line.
    pub fn log_jsonl(&self) -> String {
        let mut s = self.log.to_jsonl();
        for r in self.final_records() {
            s.push_str(&serde_json::to_string(&r).expect("serializable"));
            s.push('\n');
        }
        s
    }
}

/// Load data, train, and score the best snapshot on the test split (and on
/// held-out users when configured).
pub fn run_experiment(cfg: &ExperimentConfig, verbose: bool) -> Result<ExperimentResult, CliError> {
    let ds = load_interactions(&cfg.data.train, &cfg.data.test)?;
    let ht = build_histories(&ds, cfg.history_len)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.verbose = verbose;
    let outcome = trainer::train(&ds, &ht, &cfg.model, &cfg.loss, &cfg.sampler, &train_cfg)?;
    let test = metrics::evaluate(&outcome.best, &cfg.model.encoder, &ds, &ht, &ds.test_pos, &cfg.eval_ks)?;
    let heldout = match &cfg.data.heldout {
        Some((hist, test_path)) => {
            let users = load_heldout_users(hist, test_path, &ds.item_vocab)?;
            Some(evaluate_heldout(
                &outcome.best,
                &cfg.model.encoder,
                cfg.history_len,
                &users,
                &cfg.eval_ks,
            )?)
        }
        None => None,
    };
    let ckpt = |params| Checkpoint {
        encoder: cfg.model.encoder,
        history_len: cfg.history_len,
        params,
    };
    Ok(ExperimentResult {
        best: ckpt(outcome.best),
        last: ckpt(outcome.last),
        log: outcome.log,
        test,
        heldout,
    })
}

pub fn cmd_train(config: &Path, verbose: bool) -> Result<ExperimentResult, CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let result = run_experiment(&cfg, verbose)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, bytes: &[u8]| -> Result<(), CliError> {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(io_err(&p))
    };
    write("best.ckpt", &result.best.to_bytes())?;
    write("final.ckpt", &result.last.to_bytes())?;
    write("train_log.jsonl", result.log_jsonl().as_bytes())?;

    if let Some(last_valid) = result.log.epochs.iter().rev().find_map(|r| r.valid.as_ref()) {
        println!("validation (last evaluation):");
        for l in last_valid.to_kv_lines() {
            println!("  {l}");
        }
    }
    match result.log.best_recall() {
        Some(r) => println!(
            "best epoch {} validation recall@{SELECTION_K}={r:.6}",
            result.log.best_epoch.unwrap_or(0)
        ),
        None => println!("no validation split; kept final parameters"),
    }
    println!("test (best checkpoint):");
    for l in result.test.to_kv_lines() {
        println!("  {l}");
    }
    if let Some(h) = &result.heldout {
        println!("held-out users (best checkpoint):");
        for l in h.to_kv_lines() {
            println!("  {l}");
        }
    }
    println!("wrote {}", dir.display());
    Ok(result)
}

pub fn cmd_eval(checkpoint: &Path, train: &Path, test: &Path, ks: &[usize]) -> Result<MetricReport, CliError> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::Usage("--k needs positive cutoffs".into()));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = load_interactions(train, test)?;
    for (what, c, d) in [
        ("users", ckpt.params.num_users, ds.num_users),
        ("items", ckpt.params.num_items, ds.num_items),
    ] {
        if c != d {
            return Err(CliError::DimensionMismatch {
                what,
                checkpoint: c,
                dataset: d,
            });
        }
    }
    let ht = build_histories(&ds, ckpt.history_len)?;
    Ok(metrics::evaluate(&ckpt.params, &ckpt.encoder, &ds, &ht, &ds.test_pos, ks)?)
}

/// One sweep row: the axis value and the resulting metrics.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: String,
    pub best_epoch: Option<usize>,
    pub valid_recall: Option<f64>,
    pub test: MetricReport,
}

pub fn cmd_sweep(config: &Path, axis: SweepAxis, values: &[String]) -> Result<(Vec<SweepRow>, PathBuf), CliError> {
    let (raw, base) = load_raw(config)?;
    // Resolve every variant before training anything.
    let cfgs: Vec<ExperimentConfig> = values
        .iter()
        .map(|v| {
            let mut r: RawConfig = raw.clone();
            r.set(axis.key(), v.as_str())?;
            r.resolve(&base)
        })
        .collect::<Result<_, ConfigError>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (v, cfg) in values.iter().zip(&cfgs) {
        let res = run_experiment(cfg, false)?;
        rows.push(SweepRow {
            value: v.clone(),
            best_epoch: res.log.best_epoch,
            valid_recall: res.log.best_recall(),
            test: res.test,
        });
    }
    Ok((rows, cfgs[0].output_dir.clone()))
}

/// Aligned text table, one row per swept value.
pub fn format_sweep(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let ks: Vec<usize> = rows.first().map(|r| r.test.by_k.keys().copied().collect()).unwrap_or_default();
    let mut header = vec![axis.key().to_string(), "best_epoch".into(), format!("valid_recall@{SELECTION_K}")];
    for k in &ks {
        header.push(format!("recall@{k}"));
        header.push(format!("ndcg@{k}"));
    }
    let mut table = vec![header];
    for r in rows {
        let mut line = vec![
            r.value.clone(),
            r.best_epoch.map_or("-".into(), |e| e.to_string()),
            r.valid_recall.map_or("-".into(), |v| format!("{v:.4}")),
        ];
        for &k in &ks {
            line.push(format!("{:.4}", r.test.recall(k)));
            line.push(format!("{:.4}", r.test.ndcg(k)));
        }
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

pub fn cmd_gradcheck(seed: u64, inject_fault: bool) -> Result<Vec<verify::GradCheckReport>, CliError> {
    let fault = |g: &mut ParamGrads<f64>| {
        g.item_emb[0] += 1e-2;
    };
    let fault_ref: Option<verify::GradFault<'_>> = if inject_fault { Some(&fault) } else { None };
    Ok(verify::grad_check_all(
        seed,
        verify::DEFAULT_STEP,
        verify::DEFAULT_TOLERANCE,
        fault_ref,
    )?)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        par::set_threads(n);
    }
    match cli.command {
        Command::Train { config, verbose } => cmd_train(&config, verbose).map(|_| ()),
        Command::Eval {
            checkpoint,
            train,
            test,
            ks,
            out,
        } => {
            let report = cmd_eval(&checkpoint, &train, &test, &ks)?;
            for l in report.to_kv_lines() {
                println!("{l}");
            }
            if let Some(path) = out {
                let json = serde_json::to_string_pretty(&report).expect("serializable");
                fs::write(&path, json + "\n").map_err(io_err(&path))?;
            }
            Ok(())
        }
        Command::Sweep { config, axis, values } => {
            let (rows, dir) = cmd_sweep(&config, axis, &values)?;
            let table = format_sweep(axis, &rows);
            print!("{table}");
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let name = axis.key().replace('.', "_");
            let p = dir.join(format!("sweep_{name}.txt"));
            fs::write(&p, table).map_err(io_err(&p))
        }
        Command::Gradcheck { seed, inject_fault } => {
            let reports = cmd_gradcheck(seed, inject_fault)?;
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(CliError::GradCheckFailed(failed));
            }
            Ok(())
        }
    }
}

/// Parse arguments, run, and map errors to exit codes.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
