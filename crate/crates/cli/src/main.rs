use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dftune_cli::{
    compare, evaluate, finetune, gen_data, out_dir, plot, pretrain, read_report, resolve_config, FinetuneOptions,
    METRICS_FILE, PLOT_FILE,
};
use dftune_core::config::RunConfig;
use dftune_core::Result;

#[derive(Parser)]
#[command(name = "dftune", version, about = "RL fine-tuning of small diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        resolve_config(self.config.as_deref(), &self.sets, self.seed, self.out.as_deref())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the pretraining corpus.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the base model on the denoising loss.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset from gen-data; regenerated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fine-tune with RL or a baseline.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint from pretrain.
        #[arg(long, required_unless_present = "resume")]
        base: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from an intermediate or final checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even if the checkpoint was written under a different config.
        #[arg(long)]
        force_resume: bool,
        /// Record elapsed seconds in the metrics file.
        #[arg(long)]
        wall_clock: bool,
    },
    /// Compute the metric suite for a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Row label used by compare.
        #[arg(long)]
        label: Option<String>,
    },
    /// Side-by-side table of evaluate reports, in argument order.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// SVG chart of mean reward per task.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Metrics file; defaults to metrics.csv in the output directory.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let path = gen_data(&common.resolve()?)?;
            println!("wrote {}", path.display());
        }
        Command::Pretrain { common, data } => {
            let cfg = common.resolve()?;
            let ckpt = pretrain(&cfg, data.as_deref())?;
            println!("pretrained {} steps into {}", ckpt.iteration, cfg.out);
        }
        Command::Finetune {
            common,
            base,
            data,
            resume,
            force_resume,
            wall_clock,
        } => {
            let cfg = common.resolve()?;
            let opts = FinetuneOptions {
                data,
                resume,
                force_resume,
                wall_clock,
            };
            let ckpt = finetune(&cfg, base.as_deref(), &opts)?;
            println!(
                "{} finished at iteration {} in {}",
                cfg.finetune.method, ckpt.iteration, cfg.out
            );
        }
        Command::Evaluate {
            common,
            checkpoint,
            label,
        } => {
            let cfg = common.resolve()?;
            let report = evaluate(&cfg, &checkpoint, label.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Compare { reports } => {
            let reports = reports.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
            print!("{}", compare(&reports)?);
        }
        Command::Plot { common, metrics } => {
            let cfg = common.resolve()?;
            let dir = out_dir(&cfg)?;
            let metrics = metrics.unwrap_or_else(|| dir.join(METRICS_FILE));
            let svg = dir.join(PLOT_FILE);
            plot(&metrics, &svg, &format!("mean reward per task ({})", cfg.out))?;
            println!("wrote {}", svg.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
