//! Thin CLI over the library commands.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage/validation error,
//! 3 numerical abort.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tcatseg::commands::{
    cmd_dump_tcp, cmd_eval, cmd_grad_check, cmd_synth, cmd_train, EvalOptions, GradCheckOptions,
    SynthOptions, TrainOptions,
};
use tcatseg::network::{load_config, ModelConfig};

#[derive(Parser)]
#[command(name = "tcatseg", about = "Superpoint-guided dental point cloud segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Model config file (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArg {
    fn load(&self) -> tcatseg::Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => ModelConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic dental arches as TCATCLOUD files.
    Synth {
        #[arg(long, default_value_t = 14)]
        teeth: usize,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Total points per cloud.
        #[arg(long, default_value_t = 1024)]
        points: usize,
        /// 0 = even spacing, 1 = strongly crowded.
        #[arg(long, default_value_t = 0.5)]
        crowding: f64,
        /// Comma-separated tooth slots to remove.
        #[arg(long, value_delimiter = ',')]
        missing: Vec<usize>,
        #[arg(long, default_value_t = 0.01)]
        jitter: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every .cloud file in a directory.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
    },
    /// Evaluate a checkpoint (or the ground-truth oracle) on a directory.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Feed ground truth back as the prediction; all metrics must be 1.
        #[arg(long, default_value_t = false)]
        self_test: bool,
    },
    /// Finite-difference verification of every backward rule and of the
    /// full loss gradient on a reduced model.
    GradCheck {
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol_ops: f64,
        #[arg(long, default_value_t = 1e-3)]
        tol_model: f64,
        #[arg(long, default_value_t = 100)]
        op_trials: usize,
        /// Test hook: corrupt the named op's backward rule (the check must
        /// then fail naming it).
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
    /// Dump per-level superpoint positions for one cloud file.
    DumpTcp {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> tcatseg::Result<u8> {
    match cli.command {
        Command::Synth {
            teeth,
            count,
            seed,
            points,
            crowding,
            missing,
            jitter,
            out,
        } => {
            let paths = cmd_synth(
                &SynthOptions {
                    teeth,
                    count,
                    seed,
                    points,
                    crowding,
                    missing,
                    jitter,
                },
                &out,
            )?;
            println!("wrote {} cloud files to {}", paths.len(), out.display());
            Ok(0)
        }
        Command::Train {
            config,
            data,
            out,
            epochs,
            lr,
            momentum,
        } => {
            let cfg = config.load()?;
            let outcome = cmd_train(&cfg, &data, &out, &TrainOptions { epochs, lr, momentum })?;
            println!(
                "trained {} epochs: first total {}, best {}, final {}",
                outcome.epochs_run, outcome.first_total, outcome.best_total, outcome.final_total
            );
            println!(
                "checkpoints: {} (final), {} (best); log: {}",
                outcome.final_checkpoint.display(),
                outcome.best_checkpoint.display(),
                outcome.log_path.display()
            );
            Ok(0)
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            out,
            self_test,
        } => {
            let cfg = config.load()?;
            let outcome = cmd_eval(
                &cfg,
                checkpoint.as_deref(),
                &data,
                &out,
                &EvalOptions { self_test },
            )?;
            print!("{}", outcome.aggregate.render_human("aggregate"));
            println!("reports written to {}", out.display());
            Ok(0)
        }
        Command::GradCheck {
            seed,
            eps,
            tol_ops,
            tol_model,
            op_trials,
            corrupt_op,
        } => {
            let outcome = cmd_grad_check(&GradCheckOptions {
                seed,
                eps,
                tol_ops,
                tol_model,
                op_trials,
                corrupt_op,
            })?;
            print!("{}", outcome.render());
            Ok(if outcome.pass { 0 } else { 1 })
        }
        Command::DumpTcp {
            config,
            checkpoint,
            cloud,
            out,
        } => {
            let cfg = config.load()?;
            cmd_dump_tcp(&cfg, &checkpoint, &cloud, &out)?;
            println!("superpoint dump written to {}", out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
