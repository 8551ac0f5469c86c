use causal_reweight::commands::{self, TrainOutputs};
use causal_reweight::config::RunConfig;
use causal_reweight::Error;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "causal-reweight", version, about = "Balanced-weight representation learning for covariate-shift domain adaptation")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key (repeatable), e.g. `--set objective.lambda1=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Directory for outputs whose paths are not given explicitly.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write source and target datasets drawn from the configured causal model.
    Generate {
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Train on a source dataset.
    Train {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Train and evaluate over a parameter grid.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        /// Fixed source data; fresh data is generated per run otherwise.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long, requires = "source")]
        target: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck,
}

fn run(cli: Cli) -> Result<bool, Error> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.set)?;
    let out = |given: Option<PathBuf>, name: &str| given.unwrap_or_else(|| cli.out.join(name));
    let summary = match cli.command {
        Command::Generate { source, target } => {
            commands::generate(&cfg, &out(source, "source.csv"), &out(target, "target.csv"))?
        }
        Command::Train {
            source,
            checkpoint,
            history,
            metrics,
        } => {
            let (c, h, m) = (
                out(checkpoint, "checkpoint.txt"),
                out(history, "history.csv"),
                out(metrics, "train_metrics.json"),
            );
            commands::train(
                &cfg,
                &source,
                &TrainOutputs {
                    checkpoint: &c,
                    history: &h,
                    metrics: &m,
                },
            )?
        }
        Command::Eval {
            checkpoint,
            data,
            metrics,
        } => commands::eval(&checkpoint, &data, &out(metrics, "eval_metrics.json"))?,
        Command::Sweep { grid, source, target } => {
            let data = source.as_deref().map(|s| (s, target.as_deref()));
            commands::sweep(&cfg, &grid, data, &cli.out)?
        }
        Command::Gradcheck => {
            let report = commands::gradcheck(&cfg)?;
            print!("{}", report.render());
            if !report.passed() {
                eprintln!("gradient check failed: {}", report.failures().join(", "));
                return Ok(false);
            }
            format!("all {} components passed", report.components.len())
        }
    };
    println!("{summary}");
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
