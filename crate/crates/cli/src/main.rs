mod config;
mod plot;
mod results;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, Overrides};
use crate::plot::PlotKind;

#[derive(Parser)]
#[command(name = "dim", version, about = "Distill a labeled image dataset into a conditional generator and deploy it")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML experiment file with [dataset], [distill], [deploy] and [experiment] sections
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// mnist, fashionmnist, svhn, cifar10 or toy
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// Directory holding the canonical datasets
    #[arg(long, global = true, env = config::DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    /// Images per class generated for every deployment epoch
    #[arg(long, global = true)]
    inpc: Option<usize>,
    /// Downstream classifier architecture
    #[arg(long, global = true)]
    arch: Option<String>,
    /// logits, feature, gradient or none
    #[arg(long, global = true)]
    strategy: Option<String>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Distillation batch size
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    noise_dim: Option<usize>,
    /// Adversarial-only epochs before matching starts
    #[arg(long, global = true)]
    n_epochs: Option<usize>,
    /// Epochs with the matching loss
    #[arg(long, global = true)]
    q_epochs: Option<usize>,
    /// Deployment epochs
    #[arg(long, global = true)]
    deploy_epochs: Option<usize>,
    /// Comma-separated pool architectures, e.g. convnet3,resnet10,resnet18
    #[arg(long, global = true)]
    pool: Option<String>,
    /// Comma-separated seeds
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Output root; each plan writes into its own hash-named subdirectory
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Continue interrupted distillation runs from their last checkpoint
    #[arg(long, global = true)]
    resume: bool,
    /// Recompute cells that already have results
    #[arg(long, global = true)]
    force: bool,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            dataset: self.dataset.clone(),
            data_root: self.data_root.clone(),
            inpc: self.inpc,
            arch: self.arch.clone(),
            strategy: self.strategy.clone(),
            lambda: self.lambda,
            batch_size: self.batch_size,
            noise_dim: self.noise_dim,
            n_epochs: self.n_epochs,
            q_epochs: self.q_epochs,
            deploy_epochs: self.deploy_epochs,
            pool: self.pool.clone(),
            seeds: self.seed.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator and write its checkpoint, loss log and sample montage
    Distill {
        #[command(flatten)]
        common: Common,
    },
    /// Train downstream classifiers on images generated from a checkpoint
    Deploy {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory written by `distill`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also deploy on these architectures (comma-separated)
        #[arg(long, value_delimiter = ',')]
        archs: Option<Vec<String>>,
    },
    /// Sweep one axis, distilling and deploying every value for every seed
    Ablate {
        #[command(flatten)]
        common: Common,
        /// lambda, batch_size, noise_dim, n_epochs, strategy, pool, inpc or arch
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values, recorded verbatim
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Time generation against one downstream optimizer step per architecture
    Profile {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to time; an untrained generator of the configured shape otherwise
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "convnet3,resnet10,resnet18,resnet34")]
        archs: Vec<String>,
        /// Batch size of the timed calls
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        repetitions: usize,
    },
    /// Merge cell results of a run directory into results.csv, results.jsonl and report.md
    Report {
        /// Run directory written by distill, deploy, ablate or profile
        #[arg(long)]
        results: PathBuf,
    },
    /// Draw a chart from a results table, or a montage of generated images
    Plot {
        #[arg(long, requires = "input")]
        kind: Option<PlotKind>,
        /// results.csv, results.jsonl or loss.jsonl
        #[arg(long)]
        input: Option<PathBuf>,
        /// Checkpoint whose samples form a class-by-sample montage
        #[arg(long, conflicts_with = "kind")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<ConfigError>()
            || c.downcast_ref::<dim_core::Error>()
                .is_some_and(|e| e.is_config() || matches!(e, dim_core::Error::Validation(_)))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Distill { common } => run::distill(&common.out, common.config.as_deref(), &common.overrides(), common.resume, common.force),
        Command::Deploy { common, checkpoint, archs } => run::deploy(&common.out, common.config.as_deref(), &common.overrides(), &checkpoint, archs.as_deref(), common.force),
        Command::Ablate { common, axis, values } => run::ablate(&common.out, common.config.as_deref(), &common.overrides(), &axis, &values, common.resume, common.force),
        Command::Profile { common, checkpoint, archs, batch, warmup, repetitions } => run::profile(
            &common.out,
            common.config.as_deref(),
            &common.overrides(),
            checkpoint.as_deref(),
            &archs,
            batch,
            warmup,
            repetitions,
        ),
        Command::Report { results } => run::report(&results),
        Command::Plot { kind, input, checkpoint, per_class, seed, output } => match (kind, input, checkpoint) {
            (Some(kind), Some(input), None) => plot::plot(&input, kind, &output),
            (None, None, Some(ckpt)) => dim_core::distill::load_checkpoint(&ckpt)
                .map_err(anyhow::Error::from)
                .and_then(|c| plot::montage(&c, per_class, seed, &output)),
            _ => Err(config::config_error("plot needs either --kind with --input, or --checkpoint")),
        },
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
