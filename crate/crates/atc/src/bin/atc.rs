use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use atc::baselines::BaselineSpec;
use atc::cli;
use atc::config::{reconcile_mode_schedule, RunConfig};
use atc::rl::EncoderMode;

#[derive(Parser)]
#[command(name = "atc", about = "Temporal-contrastive encoder training on a pixel gridworld", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    E2e,
    Detached,
    Aux,
    Init,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Atc,
    Ac,
    #[value(name = "vae_t")]
    VaeT,
    Inverse,
    Similarity,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "atc-out")]
    out: PathBuf,
    /// Encoder mode override.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Unsupervised objective override.
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an expert demonstration dataset.
    Collect {
        #[command(flatten)]
        common: Common,
    },
    /// Train an encoder offline on a dataset, freeze it, checkpoint it.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Demonstration dataset file.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run the online loop under the configured encoder mode.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Contrastive accuracy and frozen-encoder RL scores of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Attention-map dumps for every encoder layer.
    Attn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Linear probe against ground-truth state, with a random-encoder control.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn resolve(common: &Common) -> atc::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = common.mode {
        cfg.mode = match mode {
            ModeArg::E2e => EncoderMode::EndToEnd,
            ModeArg::Detached => EncoderMode::DetachedAtc,
            ModeArg::Aux => EncoderMode::AuxAtc { loss_weight: 1.0 },
            ModeArg::Init => EncoderMode::InitOnly { pretrain_updates: 2_000 },
        };
        reconcile_mode_schedule(&mut cfg);
    }
    if let Some(objective) = common.objective {
        cfg.objective = match objective {
            ObjectiveArg::Atc => BaselineSpec::Atc,
            ObjectiveArg::Ac => BaselineSpec::AugmentedContrast,
            ObjectiveArg::VaeT => BaselineSpec::VaeT { temporal_shift: 1, kl_weight: 0.1 },
            ObjectiveArg::Inverse => BaselineSpec::InverseModel { temporal_shift: 1 },
            ObjectiveArg::Similarity => BaselineSpec::SimilarityLoss,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> atc::Result<()> {
    let args = Args::parse();
    match &args.command {
        Command::Collect { common } => {
            let cfg = resolve(common)?;
            cli::cmd_collect(&cfg, &common.out)?;
        }
        Command::Pretrain { common, dataset } => {
            let cfg = resolve(common)?;
            cli::cmd_pretrain(&cfg, dataset, &common.out)?;
        }
        Command::Train { common } => {
            let cfg = resolve(common)?;
            cli::cmd_train(&cfg, &common.out)?;
        }
        Command::Eval { common, checkpoint } => {
            let cfg = resolve(common)?;
            cli::cmd_eval(&cfg, checkpoint, &common.out)?;
        }
        Command::Attn { common, checkpoint } => {
            let cfg = resolve(common)?;
            cli::cmd_attn(&cfg, checkpoint, &common.out)?;
        }
        Command::Probe { common, checkpoint } => {
            let cfg = resolve(common)?;
            cli::cmd_probe(&cfg, checkpoint, &common.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
