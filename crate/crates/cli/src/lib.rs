//! Command-line front end: train, enhance, eval, gradcheck and ablate.
//!
//! Exit codes: 0 success, 1 failed run, 2 usage or configuration error,
//! 3 numerical abort.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;
pub mod images;

use commands::{EnhanceArgs, EvalArgs, GradcheckArgs};
use config::{DataSource, RunConfig, SEED_ENV};
use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "fusion", version, about = "Spatial-frequency fusion network for underwater image enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write the best checkpoint.
    Train(RunArgs),
    /// Enhance one image or a directory of PNGs with a checkpoint.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG file or directory of PNGs.
        #[arg(long)]
        input: PathBuf,
        /// Output directory; file names are kept.
        #[arg(long)]
        output: PathBuf,
        /// Resize inputs to SIZE x SIZE before enhancing.
        #[arg(long, value_name = "SIZE")]
        resize: Option<u32>,
    },
    /// Score enhanced images: PSNR/SSIM against references, UIQM always.
    Eval {
        #[arg(long)]
        enhanced: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Write per-image metrics here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare backpropagated and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        preset: String,
        #[arg(long, default_value = "full")]
        ablation: String,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_grad: Option<String>,
    },
    /// Train every ablation preset with one seed and print the table.
    Ablate(RunArgs),
}

/// Settings shared by `train` and `ablate`. Flags override `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// `key = value` file applied before the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Width preset: tiny or paper.
    #[arg(long)]
    pub preset: Option<String>,
    /// Ablation preset name.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Switch one component off (repeatable).
    #[arg(long, value_name = "TOGGLE")]
    pub disable: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Directory with `degraded/` and `clean/` PNG subdirectories.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Number of synthetic pairs to generate.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Side length of synthetic images.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory for checkpoints, history and tables.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    /// Defaults, then `FUSION_SEED`, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::from_env()?;
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let mut set = |k: &str, v: String| cfg.set(k, &v).map_err(CliError::Usage);
        if let Some(v) = &self.preset {
            set("preset", v.clone())?;
        }
        if let Some(v) = &self.ablation {
            set("ablation", v.clone())?;
        }
        for t in &self.disable {
            set(t, "false".into())?;
        }
        if let Some(v) = self.seed {
            set("seed", v.to_string())?;
        }
        if let Some(v) = self.epochs {
            set("epochs", v.to_string())?;
        }
        if let Some(v) = self.batch_size {
            set("batch_size", v.to_string())?;
        }
        if let Some(v) = self.lr {
            set("lr", v.to_string())?;
        }
        if let Some(v) = self.patience {
            set("patience", v.to_string())?;
        }
        if let Some(v) = self.val_fraction {
            set("val_fraction", v.to_string())?;
        }
        if let Some(v) = &self.checkpoint {
            set("checkpoint", v.display().to_string())?;
        }
        if let Some(v) = &self.out {
            set("out", v.display().to_string())?;
        }
        if let Some(v) = &self.data {
            cfg.data = DataSource::Directory(v.clone());
        }
        if let Some(v) = self.synthetic {
            cfg.set("synthetic", &v.to_string()).map_err(CliError::Usage)?;
        }
        if let Some(v) = self.size {
            cfg.set("size", &v.to_string()).map_err(CliError::Usage)?;
        }
        Ok(cfg)
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => commands::cmd_train(&args.resolve()?),
        Command::Ablate(args) => commands::cmd_ablate(&args.resolve()?, &mut std::io::stdout()),
        Command::Enhance {
            checkpoint,
            input,
            output,
            resize,
        } => commands::cmd_enhance(&EnhanceArgs {
            checkpoint,
            input,
            output,
            resize,
        }),
        Command::Eval {
            enhanced,
            reference,
            csv,
        } => commands::cmd_eval(&EvalArgs {
            enhanced,
            reference,
            csv,
        }),
        Command::Gradcheck {
            preset,
            ablation,
            seed,
            corrupt_grad,
        } => commands::cmd_gradcheck(&GradcheckArgs {
            preset,
            ablation,
            seed,
            corrupt: corrupt_grad,
        }),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
