use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use rlfat_cli::{load_config, metrics, pipeline};

#[derive(Parser)]
#[command(name = "rlfat", version, about = "Desk-scale adversarial training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackName {
    Fgsm,
    Pgd,
    Cw,
    Nattack,
}

impl AttackName {
    fn as_str(self) -> &'static str {
        match self {
            AttackName::Fgsm => "fgsm",
            AttackName::Pgd => "pgd",
            AttackName::Cw => "cw",
            AttackName::Nattack => "nattack",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and save its checkpoint
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to <output_dir>/model.ckpt
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Attack the test set and write per-example success flags
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        attack: AttackName,
        /// Defaults to <output_dir>/attack_<name>.tsv
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Clean accuracy and robust accuracy under the configured attacks
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Loss sensitivity under the configured brightness and gamma shifts
    Sensitivity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// SmoothGrad salience maps as PGM files
    Saliency {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated test indices; defaults to the config's list
        #[arg(long, value_delimiter = ',')]
        indices: Option<Vec<usize>>,
        /// Defaults to <output_dir>/saliency
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage in sequence
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize a metrics log
    Report {
        #[arg(long)]
        metrics: PathBuf,
    },
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, checkpoint } => {
            let cfg = load_config(&config)?;
            let (train, _) = pipeline::load_data(&cfg)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output_dir.join(pipeline::CHECKPOINT));
            pipeline::train_stage(&cfg, &train, &ckpt)?;
            println!("checkpoint written to {}", ckpt.display());
        }
        Command::Attack {
            config,
            checkpoint,
            attack,
            out,
        } => {
            let cfg = load_config(&config)?;
            let (_, test) = pipeline::load_data(&cfg)?;
            let model = pipeline::load_checkpoint(&checkpoint, &test)?;
            let spec = pipeline::attack_by_name(&cfg, attack.as_str())?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join(format!("attack_{}.tsv", attack.as_str())));
            let rate = pipeline::attack_stage(&cfg, &model, &test, &spec, &out)?;
            println!("{} success rate {rate:.4}; flags in {}", spec.name(), out.display());
        }
        Command::Evaluate { config, checkpoint } => {
            let cfg = load_config(&config)?;
            let (_, test) = pipeline::load_data(&cfg)?;
            let model = pipeline::load_checkpoint(&checkpoint, &test)?;
            pipeline::evaluate_stage(&cfg, &model, &test)?;
        }
        Command::Sensitivity { config, checkpoint } => {
            let cfg = load_config(&config)?;
            let (_, test) = pipeline::load_data(&cfg)?;
            let model = pipeline::load_checkpoint(&checkpoint, &test)?;
            pipeline::sensitivity_stage(&cfg, &model, &test)?;
        }
        Command::Saliency {
            config,
            checkpoint,
            indices,
            out,
        } => {
            let cfg = load_config(&config)?;
            let (_, test) = pipeline::load_data(&cfg)?;
            let model = pipeline::load_checkpoint(&checkpoint, &test)?;
            let indices = indices.unwrap_or_else(|| cfg.saliency.indices.clone());
            let out = out.unwrap_or_else(|| cfg.output_dir.join("saliency"));
            for p in pipeline::saliency_stage(&cfg, &model, &test, &indices, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let summary = pipeline::run(&cfg)?;
            print!("{}", metrics::report(&metrics::read_metrics(&summary.metrics)?));
        }
        Command::Report { metrics: path } => {
            print!("{}", metrics::report(&metrics::read_metrics(&path)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
