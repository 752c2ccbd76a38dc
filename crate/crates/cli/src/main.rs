use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fairgen_cli::commands::{self, LandscapeArgs};
use fairgen_cli::{CliError, Result};

#[derive(Parser)]
#[command(
    name = "fairgen",
    version,
    about = "Train and evaluate fairness-aware forgery detectors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as CSV plus a subgroup stats sidecar.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `dataset.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes checkpoint.bin, its .meta.toml and history.tsv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// `full` or `baseline`; overrides `train.mode`.
        #[arg(long)]
        mode: Option<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `train.max_iterations`.
        #[arg(long)]
        max_iterations: Option<u64>,
    },
    /// Evaluate a checkpoint; writes report.txt, metrics.tsv and subgroups.tsv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV dataset; defaults to the holdout of the training config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train and evaluate one model per value of a loss hyperparameter.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "lambda")]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Export a 2-D loss landscape slice around a checkpoint.
    Landscape {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        extent: Option<f64>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut cfg = commands::load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.dataset.seed = s;
            }
            let d = commands::cmd_gen_data(&cfg, &out)?;
            println!("wrote {} samples to {}", d.len(), out.display());
        }
        Command::Train {
            config,
            out,
            seed,
            mode,
            resume,
            max_iterations,
        } => {
            let mut cfg = commands::load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            if max_iterations.is_some() {
                cfg.train.max_iterations = max_iterations;
            }
            commands::cmd_train(&cfg, &out, resume.as_deref(), &mut std::io::stdout())?;
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            threshold,
        } => {
            let r = commands::cmd_eval(&checkpoint, data.as_deref(), &out, threshold)?;
            println!(
                "f_fpr={:.2} f_meo={:.2} f_dp={:.2} f_oae={:.2} auc={:.2}",
                r.f_fpr, r.f_meo, r.f_dp, r.f_oae, r.auc
            );
        }
        Command::Sweep {
            config,
            out,
            param,
            values,
            seed,
            mode,
        } => {
            let mut cfg = commands::load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            print!("{}", commands::cmd_sweep(&cfg, &param, &values, &out)?);
        }
        Command::Landscape {
            checkpoint,
            data,
            out,
            seed,
            extent,
            resolution,
            samples,
        } => {
            let (_, meta) = fairgen_cli::checkpoint::load(&checkpoint)?;
            let d = &meta.config.landscape;
            let args = LandscapeArgs {
                extent: extent.unwrap_or(d.extent),
                resolution: resolution.unwrap_or(d.resolution),
                samples: samples.unwrap_or(d.samples),
                seed: seed.unwrap_or(d.seed),
            };
            commands::cmd_landscape(&checkpoint, data.as_deref(), &out, args)?;
            println!(
                "wrote {}x{} grid to {}",
                args.resolution,
                args.resolution,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code() as u8
}
