use clap::{Parser, Subcommand};
use std::path::PathBuf;

use udama::cli::{cmd_adapt, cmd_evaluate, cmd_experiment, cmd_generate, cmd_pretrain, ExperimentConfig};

#[derive(Parser)]
#[command(name = "udama", about = "Adversarial domain adaptation experiments on synthetic wearable cohorts", version)]
struct Args {
    /// JSON experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides both the data and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source/target datasets.
    Generate,
    /// Pre-train on the source cohort and save a checkpoint.
    Pretrain,
    /// Adversarially adapt a pretrained checkpoint on the target cohort.
    Adapt {
        /// Pretrained checkpoint (default: <out>/pretrained.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run every configured method through cross-validation.
    Experiment,
}

fn run() -> udama::Result<()> {
    let args = Args::parse();
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    config.apply_overrides(args.seed, args.out.clone());

    match &args.command {
        Command::Generate => cmd_generate(&config)?,
        Command::Pretrain => {
            cmd_pretrain(&config)?;
        }
        Command::Adapt { checkpoint } => {
            cmd_adapt(&config, checkpoint.as_deref())?;
        }
        Command::Evaluate { checkpoint, dataset } => {
            let evaluation = cmd_evaluate(&config, checkpoint, dataset)?;
            println!("{}", serde_json::to_string_pretty(&evaluation).expect("serializable"));
        }
        Command::Experiment => {
            let results = cmd_experiment(&config)?;
            for m in &results.methods {
                println!(
                    "{}: corr {:.3} ± {:.3}, r2 {:.3}, mse {:.3}, hd {:.3}",
                    m.method,
                    m.report.corr.mean,
                    m.report.corr.std,
                    m.report.r2.mean,
                    m.report.mse.mean,
                    m.report.hellinger.mean,
                );
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
