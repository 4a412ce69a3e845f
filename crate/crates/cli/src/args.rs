//! Command-line arguments and config resolution.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lyadeq::attacks::AttackFamily;
use lyadeq::experiment::ExperimentConfig;
use lyadeq::layers::NormKind;
use lyadeq::model::Variant;

use crate::{CliError, CliResult};

pub const DEFAULT_MNIST_DIR: &str = "data/mnist";

#[derive(Debug, Parser)]
#[command(name = "lyadeq", version, about = "Train and attack Lyapunov-stabilized deep equilibrium classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one variant and write per-epoch checkpoints.
    Train,
    /// Clean accuracy of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Robust accuracy of a checkpoint under the configured attack and radii.
    AttackEval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train all four variants and evaluate clean, I-FGSM and PGD accuracy on
    /// the radius grid.
    Ablate,
    /// Run the invariant suite on a checkpoint, or on a fresh model.
    VerifyInvariants {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::AttackEval { .. } => "attack-eval",
            Command::Ablate => "ablate",
            Command::VerifyInvariants { .. } => "verify-invariants",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON experiment config; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// deq, deq-orth, lyadeq-no-orth or lyadeq.
    #[arg(long, global = true)]
    pub variant: Option<Variant>,

    /// Attack radius as an integer k meaning k/255.
    #[arg(long, global = true)]
    pub epsilon: Option<u32>,

    /// ifgsm or pgd.
    #[arg(long, global = true)]
    pub attack: Option<AttackFamily>,

    /// Output directory (default runs/<command>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Directory holding the MNIST IDX files.
    #[arg(long, global = true, env = "LYADEQ_MNIST_DIR", default_value = DEFAULT_MNIST_DIR)]
    pub data_dir: PathBuf,

    /// Normalization inside the fixed-point map: layer or batch.
    #[arg(long, global = true, default_value = "layer")]
    pub norm: NormKind,

    /// Use the full training and test splits instead of the seeded subsets.
    #[arg(long, global = true)]
    pub full: bool,
}

impl CommonArgs {
    /// Config file (or defaults) with command-line overrides applied.
    pub fn resolve_config(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                ExperimentConfig::from_json(&text).map_err(|e| CliError::Usage(e.to_string()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(k) = self.epsilon {
            cfg.attack.eps_255 = vec![k];
        }
        if let Some(f) = self.attack {
            cfg.attack.family = f;
        }
        if self.full {
            cfg.subset = None;
        }
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn out_dir(&self, command: &Command) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(command.name()))
    }
}
