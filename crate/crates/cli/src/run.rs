//! Single runs: training with artifact output, resume, and evaluation.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use trails_core::metrics::{disagreement_breakdown, MetricsReport};
use trails_core::train::{Evaluation, HistoryRecord, TrainState, Trainer};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const HISTORY_FILE: &str = "history.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ntck";
pub const CONFIG_FILE: &str = "config.resolved.json";
pub const DISAGREEMENT_FILE: &str = "disagreements.csv";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    /// Accept a checkpoint whose config hash differs.
    pub force: bool,
    pub dump_disagreements: bool,
}

#[derive(Debug)]
pub struct RunOutcome {
    /// Records produced by this invocation (after the resume point, if any).
    pub history: Vec<HistoryRecord>,
    pub final_eval: Evaluation,
    pub state: TrainState,
}

/// Format with 6 significant digits, shortest form (`0.9125`, `1.23457e6`).
pub fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("formatted float parses");
    let plain = rounded.to_string();
    if plain.len() <= 12 {
        plain
    } else {
        format!("{rounded:e}")
    }
}

fn io_ctx<T>(what: impl FnOnce() -> String) -> impl FnOnce(std::io::Error) -> Result<T, CliError> {
    move |e| Err(CliError::io(what(), e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).or_else(io_ctx(|| format!("writing {}", path.display())))
}

pub const SUMMARY_HEADER: [&str; 12] = [
    "step",
    "accuracy",
    "nll",
    "ece",
    "pd",
    "perplexity",
    "sparsity",
    "train_loss",
    "forward_flops",
    "dense_forward_flops",
    "train_flops",
    "dense_baseline_train_flops",
];

fn write_summary(path: &Path, rec: &HistoryRecord, dense_baseline: f64) -> Result<(), CliError> {
    let m = &rec.metrics;
    let row = [
        rec.step.to_string(),
        sig6(m.accuracy),
        sig6(m.nll),
        sig6(m.ece),
        m.pd.map(sig6).unwrap_or_default(),
        sig6(m.perplexity),
        sig6(rec.sparsity),
        sig6(rec.train_loss),
        sig6(m.flops.forward_sparse),
        sig6(m.flops.forward_dense),
        sig6(m.flops.train_total),
        sig6(dense_baseline),
    ];
    let csv_err = |e: csv::Error| CliError::io(format!("writing {}", path.display()), e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(SUMMARY_HEADER).map_err(csv_err)?;
    w.write_record(&row).map_err(csv_err)?;
    w.flush().or_else(io_ctx(|| format!("writing {}", path.display())))
}

fn write_disagreements(path: &Path, ev: &Evaluation, labels: &[usize]) -> Result<(), CliError> {
    let recs = disagreement_breakdown(&ev.head_predictions, &ev.ensemble_predictions, labels)?;
    let csv_err = |e: csv::Error| CliError::io(format!("writing {}", path.display()), e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["sample".to_string(), "label".into(), "ensemble".into()];
    header.extend((0..ev.head_predictions.len()).map(|h| format!("head{h}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in recs {
        let mut row = vec![r.sample.to_string(), r.label.to_string(), r.ensemble.to_string()];
        row.extend(r.heads.iter().map(usize::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().or_else(io_ctx(|| format!("writing {}", path.display())))
}

/// Keep only history lines at or before `step`.
fn truncate_history(path: &Path, step: usize) -> Result<(), CliError> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).or_else(io_ctx(|| format!("reading {}", path.display())))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.or_else(io_ctx(|| format!("reading {}", path.display())))?;
        let v: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| CliError::Checkpoint(format!("unreadable history line in {}: {e}", path.display())))?;
        if v["step"].as_u64().is_some_and(|s| s as usize <= step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    write_file(path, kept)
}

/// Train one configuration, writing the resolved config, history,
/// checkpoints and summary under `opts.out`.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let mut cfg = cfg.clone();
    cfg.sync_train();
    cfg.output_dir = Some(opts.out.clone());
    cfg.validate()?;
    let (train, test) = cfg.load_data()?;
    let tcfg = cfg.train_config();
    let model = cfg.build_model()?;
    let trainer = Trainer::new(&tcfg, &model, &train, &test).map_err(|e| match e {
        trails_core::Error::Config { field, reason } => CliError::Config {
            field: format!("train.{field}"),
            reason,
        },
        other => other.into(),
    })?;
    let hash = cfg.hash();
    let mut st = TrainState::new(model, &tcfg);

    let out = &opts.out;
    fs::create_dir_all(out).or_else(io_ctx(|| format!("creating {}", out.display())))?;
    write_file(&out.join(CONFIG_FILE), cfg.resolved_json())?;
    let history_path = out.join(HISTORY_FILE);
    match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config_hash != hash && !opts.force {
                return Err(CliError::Checkpoint(format!(
                    "{} was written for a different config (hash mismatch); use --force to override",
                    path.display()
                )));
            }
            if ck.seed != cfg.seed && !opts.force {
                return Err(CliError::Checkpoint(format!(
                    "checkpoint seed {} differs from config seed {}",
                    ck.seed, cfg.seed
                )));
            }
            ck.restore(&mut st)?;
            truncate_history(&history_path, st.step)?;
        }
        None => write_file(&history_path, "")?,
    }

    let ckpt_dir = out.join("checkpoints");
    if cfg.checkpoint_interval.is_some() {
        fs::create_dir_all(&ckpt_dir).or_else(io_ctx(|| format!("creating {}", ckpt_dir.display())))?;
    }
    let mut history_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&history_path)
        .or_else(io_ctx(|| format!("opening {}", history_path.display())))?;
    let mut history = Vec::new();
    while st.step < tcfg.steps {
        let rec = trainer.step(&mut st)?;
        if let Some(rec) = rec {
            let line = serde_json::to_string(&rec).expect("history serializes");
            writeln!(history_file, "{line}").or_else(io_ctx(|| format!("writing {}", history_path.display())))?;
            Checkpoint::from_state(&st, hash, cfg.seed).save(&out.join(CHECKPOINT_FILE))?;
            history.push(rec);
        }
        if let Some(k) = cfg.checkpoint_interval {
            if st.step % k == 0 {
                let p = ckpt_dir.join(format!("step-{:06}.ntck", st.step));
                Checkpoint::from_state(&st, hash, cfg.seed).save(&p)?;
            }
        }
    }

    let final_eval = trainer.evaluate(&st)?;
    let last = match history.last() {
        Some(r) => r.clone(),
        None => last_history_record(&history_path)?,
    };
    write_summary(&out.join(SUMMARY_FILE), &last, trainer.budget().dense_baseline)?;
    if opts.dump_disagreements {
        write_disagreements(&out.join(DISAGREEMENT_FILE), &final_eval, &test.labels)?;
    }
    Ok(RunOutcome {
        history,
        final_eval,
        state: st,
    })
}

fn last_history_record(path: &Path) -> Result<HistoryRecord, CliError> {
    let text = fs::read_to_string(path).or_else(io_ctx(|| format!("reading {}", path.display())))?;
    let line = text
        .lines()
        .last()
        .ok_or_else(|| CliError::Checkpoint(format!("{} has no records to summarize", path.display())))?;
    serde_json::from_str(line).map_err(|e| CliError::Checkpoint(format!("unreadable history in {}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub step: u64,
    pub metrics: MetricsReport,
}

/// Evaluate a checkpoint on the config's test split.
pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path, force: bool, out: Option<&Path>, dump: bool) -> Result<EvalOutput, CliError> {
    let mut cfg = cfg.clone();
    cfg.sync_train();
    cfg.validate()?;
    let (_, test) = cfg.load_data()?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.config_hash != cfg.hash() && !force {
        return Err(CliError::Checkpoint(format!(
            "{} was written for a different config (hash mismatch); use --force to override",
            checkpoint.display()
        )));
    }
    let tcfg = cfg.train_config();
    let mut st = TrainState::new(cfg.build_model()?, &tcfg);
    ck.restore(&mut st)?;
    let ev = trails_core::train::evaluate(&st.model, &test, tcfg.pd_mode)?;
    let ledger = trails_core::train::count_flops(&st.model)?;
    let mut metrics = ev.report.clone();
    metrics.step = st.step;
    metrics.flops.forward_sparse = ledger.forward_sparse;
    metrics.flops.forward_dense = ledger.forward_dense;
    metrics.flops.train_total = st.train_flops;
    let output = EvalOutput {
        step: ck.step,
        metrics,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).or_else(io_ctx(|| format!("creating {}", dir.display())))?;
        write_file(
            &dir.join(EVAL_FILE),
            serde_json::to_string_pretty(&output).expect("eval serializes"),
        )?;
        if dump {
            write_disagreements(&dir.join(DISAGREEMENT_FILE), &ev, &test.labels)?;
        }
    }
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.9125), "0.9125");
        assert_eq!(sig6(2.0 / 3.0), "0.666667");
        assert_eq!(sig6(1234567.0), "1234570");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(1.23456789e12), "1.23457e12");
        assert_eq!(sig6(3.14159265e-7), "3.14159e-7");
    }
}
