use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use trails_cli::run::{eval, run, RunOptions};
use trails_cli::sweep::{sweep, Axis, SweepOptions};
use trails_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "trails", version, about = "Train and evaluate multi-head sparse ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-sample head disagreements of the final model.
        #[arg(long)]
        dump_disagreements: bool,
        /// Continue from a checkpoint written by a run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a checkpoint from a different config.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on the config's test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dump_disagreements: bool,
        #[arg(long)]
        force: bool,
    },
    /// Run a grid over one axis and aggregate over seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Repeats per value, seeded `seed`, `seed + 1`, ...
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.sync_train();
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    out.or_else(|| cfg.output_dir.clone()).ok_or_else(|| CliError::Config {
        field: "output_dir".into(),
        reason: "no output directory; set it in the config or pass --out".into(),
    })
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            dump_disagreements,
            resume,
            force,
        } => {
            let cfg = load(&config, seed)?;
            let out = out_dir(&cfg, out)?;
            let outcome = run(
                &cfg,
                &RunOptions {
                    out: out.clone(),
                    resume,
                    force,
                    dump_disagreements,
                },
            )?;
            let m = &outcome.final_eval.report;
            println!(
                "step {}: accuracy {:.4} nll {:.4} ece {:.4}{} -> {}",
                outcome.state.step,
                m.accuracy,
                m.nll,
                m.ece,
                m.pd.map(|pd| format!(" pd {pd:.4}")).unwrap_or_default(),
                out.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            seed,
            out,
            dump_disagreements,
            force,
        } => {
            let cfg = load(&config, seed)?;
            let result = eval(&cfg, &checkpoint, force, out.as_deref(), dump_disagreements)?;
            println!("{}", serde_json::to_string_pretty(&result).expect("eval serializes"));
        }
        Command::Sweep {
            config,
            axis,
            values,
            seeds,
            workers,
            seed,
            out,
        } => {
            let cfg = load(&config, seed)?;
            let out = out_dir(&cfg, out)?;
            let rows = sweep(
                &cfg,
                &SweepOptions {
                    axis,
                    values,
                    seeds,
                    workers,
                    out: out.clone(),
                },
            )?;
            for row in rows {
                if let Some((_, Some((mean, std)))) = row.stats.iter().find(|(n, _)| n == "accuracy") {
                    println!("{} = {}: accuracy {mean:.4} ± {std:.4} over {} runs", axis.name(), row.value, row.runs);
                }
            }
            println!("-> {}", out.join(trails_cli::sweep::SWEEP_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
