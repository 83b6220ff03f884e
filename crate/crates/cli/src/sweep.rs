//! Grids of runs over one configuration axis, aggregated over seeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::run::{run, sig6, RunOptions, SUMMARY_FILE};

pub const SWEEP_FILE: &str = "sweep.csv";
/// Summary columns aggregated into `sweep.csv`.
pub const AGGREGATED: [&str; 6] = ["accuracy", "nll", "ece", "pd", "perplexity", "train_flops"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    BlocksInHead,
    Sparsity,
    Heads,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::BlocksInHead => "blocks_in_head",
            Axis::Sparsity => "sparsity",
            Axis::Heads => "heads",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub axis: Axis,
    pub values: Vec<f64>,
    /// Repeats per value; run `r` uses seed `config.seed + r`.
    pub seeds: usize,
    pub workers: usize,
    pub out: PathBuf,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn value_label(axis: Axis, v: f64) -> String {
    match axis {
        Axis::Sparsity => sig6(v),
        Axis::BlocksInHead | Axis::Heads => format!("{}", v as usize),
    }
}

/// `cfg` with the axis set to `value`.
pub fn apply(cfg: &ExperimentConfig, axis: Axis, value: f64) -> Result<ExperimentConfig, CliError> {
    let mut c = cfg.clone();
    let integral = |field: &str| {
        if value >= 0.0 && value.fract() == 0.0 && value.is_finite() {
            Ok(value as usize)
        } else {
            Err(CliError::Config {
                field: field.to_string(),
                reason: format!("sweep value {value} is not a non-negative integer"),
            })
        }
    };
    match axis {
        Axis::BlocksInHead => c.ensemble.blocks_in_head = integral("ensemble.blocks_in_head")?,
        Axis::Heads => c.ensemble.heads = integral("ensemble.heads")?,
        Axis::Sparsity => c.sparsity.ratio = value,
    }
    c.sync_train();
    Ok(c)
}

pub fn run_dir(out: &Path, axis: Axis, value: f64, seed: u64) -> PathBuf {
    out.join(format!("{}-{}", axis.name(), value_label(axis, value)))
        .join(format!("seed-{seed}"))
}

/// Read one summary.csv into (column, value) pairs; empty cells are `None`.
pub fn read_summary(path: &Path) -> Result<Vec<(String, Option<f64>)>, CliError> {
    let csv_err = |e: csv::Error| CliError::io(format!("reading {}", path.display()), e.into());
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let row = r
        .records()
        .next()
        .ok_or_else(|| CliError::io(format!("reading {}", path.display()), std::io::ErrorKind::UnexpectedEof.into()))?
        .map_err(csv_err)?;
    Ok(header
        .iter()
        .zip(row.iter())
        .map(|(h, v)| (h.to_string(), v.parse().ok()))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub runs: usize,
    /// (column, mean, std) per aggregated column; `None` when a run lacks it.
    pub stats: Vec<(String, Option<(f64, f64)>)>,
}

/// Validate every grid point, run the grid on `workers` threads, then
/// aggregate the per-run summaries into `sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig, opts: &SweepOptions) -> Result<Vec<SweepRow>, CliError> {
    if opts.values.is_empty() {
        return Err(CliError::Config {
            field: "sweep.values".into(),
            reason: "no values given".into(),
        });
    }
    if opts.seeds < 1 {
        return Err(CliError::Config {
            field: "sweep.seeds".into(),
            reason: "need at least one seed".into(),
        });
    }
    let mut grid = Vec::new();
    for &v in &opts.values {
        for r in 0..opts.seeds {
            let mut c = apply(cfg, opts.axis, v)?;
            c.seed = cfg.seed + r as u64;
            c.sync_train();
            c.validate().map_err(|e| match e {
                CliError::Config { field, reason } => CliError::Config {
                    field,
                    reason: format!("{reason} (sweep {} = {v})", opts.axis.name()),
                },
                other => other,
            })?;
            grid.push((v, c));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| CliError::io("starting worker pool", std::io::Error::other(e)))?;
    let results: Vec<Result<(), CliError>> = pool.install(|| {
        use rayon::prelude::*;
        grid.par_iter()
            .map(|(v, c)| {
                let run_opts = RunOptions {
                    out: run_dir(&opts.out, opts.axis, *v, c.seed),
                    ..RunOptions::default()
                };
                run(c, &run_opts).map(|_| ())
            })
            .collect()
    });
    results.into_iter().collect::<Result<Vec<()>, _>>()?;

    let mut rows = Vec::new();
    for &v in &opts.values {
        let mut columns: Vec<Vec<Option<f64>>> = vec![Vec::new(); AGGREGATED.len()];
        for r in 0..opts.seeds {
            let summary = read_summary(&run_dir(&opts.out, opts.axis, v, cfg.seed + r as u64).join(SUMMARY_FILE))?;
            for (col, name) in columns.iter_mut().zip(AGGREGATED) {
                col.push(summary.iter().find(|(h, _)| h == name).and_then(|(_, x)| *x));
            }
        }
        let stats = AGGREGATED
            .iter()
            .zip(columns)
            .map(|(name, col)| {
                let vals: Option<Vec<f64>> = col.into_iter().collect();
                (name.to_string(), vals.map(|v| mean_std(&v)))
            })
            .collect();
        rows.push(SweepRow {
            value: v,
            runs: opts.seeds,
            stats,
        });
    }
    write_sweep(&opts.out.join(SWEEP_FILE), opts.axis, &rows)?;
    Ok(rows)
}

fn write_sweep(path: &Path, axis: Axis, rows: &[SweepRow]) -> Result<(), CliError> {
    let csv_err = |e: csv::Error| CliError::io(format!("writing {}", path.display()), e.into());
    std::fs::create_dir_all(path.parent().expect("sweep file has a parent"))
        .map_err(|e| CliError::io(format!("creating {}", path.display()), e))?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["axis".to_string(), "value".into(), "runs".into()];
    for name in AGGREGATED {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut rec = vec![axis.name().to_string(), value_label(axis, row.value), row.runs.to_string()];
        for (_, s) in &row.stats {
            match s {
                Some((m, sd)) => {
                    rec.push(sig6(*m));
                    rec.push(sig6(*sd));
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_cases() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn labels_and_dirs() {
        assert_eq!(value_label(Axis::Sparsity, 0.95), "0.95");
        assert_eq!(value_label(Axis::Heads, 3.0), "3");
        assert_eq!(
            run_dir(Path::new("o"), Axis::Heads, 3.0, 7),
            Path::new("o").join("heads-3").join("seed-7")
        );
    }
}
