//! Command-line harness: training, evaluation, ablation grids, gradient
//! checks and synthetic-data generation. Errors exit with a per-category
//! code; 0 means success.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfd::ablate::{render, run_grid};
use cfd::config::RunConfig;
use cfd::data::{generate, save_dataset};
use cfd::error::Error;
use cfd::eval::evaluate_model;
use cfd::gradcheck::{run_scope, SCOPE_NAMES};
use cfd::model::{load_checkpoint, ModelParams};
use cfd::train::{metrics_text, train_run};
use cfd::Result;

#[derive(Parser)]
#[command(name = "cfd", about = "Calibrated feature decomposition benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Shared configuration source: optional file plus dotted-path overrides.
#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (toml); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override as `dotted.path=value`, may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its artifacts into a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory for config snapshot, log, checkpoint, metrics.
        #[arg(long)]
        out: PathBuf,
        /// Seed; defaults to the first entry of the config seed list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the unseen-domain split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run a named ablation grid over the seed list.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Grid: compo, norm-placement, stage, domain-loss, attention or
        /// pfd-vs-cfd.
        #[arg(long)]
        grid: String,
        /// Comma-separated seeds; defaults to the config seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Optional file to also write the rendered table into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks over named scopes.
    Gradcheck {
        /// Scope name; all scopes when omitted.
        #[arg(long)]
        scope: Option<String>,
    },
    /// Generate the synthetic dataset and save it to a directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out, seed } => {
            let config = cfg.load()?;
            let seed = seed.unwrap_or_else(|| config.seeds.first().copied().unwrap_or(1));
            let (report, result) = train_run::<f32>(&config, seed, &out)?;
            if let Some(last) = report.epochs.last() {
                println!(
                    "trained {} epochs, final total loss {:.4}",
                    report.epochs.len(),
                    last.total_loss
                );
            }
            print!("{}", metrics_text(seed, &result));
        }
        Command::Eval { cfg, checkpoint } => {
            let config = cfg.load()?;
            let dataset = generate(&config.data)?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            let mut params = ModelParams::<f32>::new(&config.backbone, &mut rng)?;
            load_checkpoint(&checkpoint, &config.backbone, &mut params)?;
            let result =
                evaluate_model(&config.backbone, &mut params, &dataset, config.l2_normalize, 10)?;
            print!("{}", metrics_text(config.seeds.first().copied().unwrap_or(1), &result));
        }
        Command::Ablate {
            cfg,
            grid,
            seeds,
            out,
        } => {
            let config = cfg.load()?;
            let seeds = if seeds.is_empty() { config.seeds.clone() } else { seeds };
            let result = run_grid(&grid, &config, &seeds)?;
            let table = render(&result);
            print!("{table}");
            if let Some(path) = out {
                std::fs::write(path, table)?;
            }
            if result.checks.iter().any(|(_, ok)| !ok) {
                return Err(Error::Data(format!(
                    "grid {grid}: a directional expectation failed"
                )));
            }
        }
        Command::Gradcheck { scope } => {
            let scopes: Vec<&str> = match &scope {
                Some(s) => vec![s.as_str()],
                None => SCOPE_NAMES.to_vec(),
            };
            let mut failed = Vec::new();
            for s in scopes {
                let rep = run_scope(s)?;
                println!(
                    "{s}: {} (max rel err {:.3e}, tol {:.0e}, {} parameters)",
                    if rep.pass() { "pass" } else { "FAIL" },
                    rep.max_rel_err(),
                    rep.tol,
                    rep.params.len()
                );
                if !rep.pass() {
                    failed.push(s.to_string());
                }
            }
            if !failed.is_empty() {
                return Err(Error::Autodiff(format!(
                    "gradient check failed for scopes: {}",
                    failed.join(", ")
                )));
            }
        }
        Command::GenData { cfg, out } => {
            let config = cfg.load()?;
            let dataset = generate(&config.data)?;
            save_dataset(&out, &dataset)?;
            println!(
                "wrote {} samples ({} ids x {} images x {} domains) to {}",
                dataset.samples.len(),
                config.data.num_ids,
                config.data.images_per_id,
                config.data.train_domains + 1,
                out.display()
            );
        }
    }
    Ok(())
}

use rand::SeedableRng;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
