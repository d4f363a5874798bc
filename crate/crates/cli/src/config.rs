//! Run configuration: built-in defaults, then an optional `key = value`
//! file, then command-line flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fusion_core::model::width_preset;
use fusion_core::training::{AdamConfig, TrainConfig};
use fusion_core::{AblationConfig, ModelConfig};

use crate::error::{CliError, Result};

/// Environment variable consulted when no seed is given anywhere else.
pub const SEED_ENV: &str = "FUSION_SEED";

pub const DEFAULT_SYNTHETIC: usize = 20;

const TOGGLES: [&str; 6] = [
    "freq_attention",
    "freq_branch",
    "freq_fusion",
    "chan_calib",
    "local_attention",
    "global_attention",
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { count: usize, size: usize },
    /// Directory with `degraded/` and `clean/` subdirectories of matching PNGs.
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub ablation_name: String,
    /// Explicit on/off switches applied on top of the ablation preset.
    pub toggles: Vec<(String, bool)>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub patience: usize,
    pub data: DataSource,
    pub val_fraction: f64,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            preset: "tiny".into(),
            ablation_name: "full".into(),
            toggles: Vec::new(),
            seed: 0,
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: t.adam,
            patience: t.patience,
            data: DataSource::Synthetic {
                count: DEFAULT_SYNTHETIC,
                size: 64,
            },
            val_fraction: 0.2,
            checkpoint: None,
            out: PathBuf::from("fusion-run"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("invalid value `{value}` for `{key}` (expected true/false)")),
    }
}

impl RunConfig {
    /// Defaults with the seed taken from `FUSION_SEED` when set.
    pub fn from_env() -> Result<Self> {
        let mut cfg = Self::default();
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("{SEED_ENV}={v} is not a valid seed")))?;
        }
        Ok(cfg)
    }

    /// Sets one key. Unknown keys are errors so typos never pass silently.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "preset" => self.preset = value.to_string(),
            "ablation" => self.ablation_name = value.to_string(),
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "eps" => self.adam.eps = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "data" => self.data = DataSource::Directory(PathBuf::from(value)),
            "synthetic" => {
                let size = match self.data {
                    DataSource::Synthetic { size, .. } => size,
                    DataSource::Directory(_) => 64,
                };
                self.data = DataSource::Synthetic {
                    count: parse(key, value)?,
                    size,
                };
            }
            "size" => match &mut self.data {
                DataSource::Synthetic { size, .. } => *size = parse(key, value)?,
                DataSource::Directory(_) => return Err("`size` only applies to synthetic data".into()),
            },
            t if TOGGLES.contains(&t) => self.toggles.push((t.to_string(), parse_bool(key, value)?)),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies a config file: one `key = value` per line, `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| CliError::ConfigLine {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(())
    }

    pub fn ablation(&self) -> Result<AblationConfig> {
        let mut ab = AblationConfig::preset(&self.ablation_name).map_err(|e| CliError::usage(e.to_string()))?;
        for (name, on) in &self.toggles {
            let slot = match name.as_str() {
                "freq_attention" => &mut ab.freq_attention,
                "freq_branch" => &mut ab.freq_branch,
                "freq_fusion" => &mut ab.freq_fusion,
                "chan_calib" => &mut ab.chan_calib,
                "local_attention" => &mut ab.local_attention,
                "global_attention" => &mut ab.global_attention,
                other => return Err(CliError::usage(format!("unknown toggle `{other}`"))),
            };
            *slot = *on;
        }
        ab.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(ab)
    }

    pub fn width(&self) -> Result<usize> {
        width_preset(&self.preset).map_err(|e| CliError::usage(e.to_string()))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::new(self.width()?, self.ablation()?).map_err(|e| CliError::usage(e.to_string()))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("best.fusn"))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: self.adam,
            patience: self.patience,
            seed: self.seed,
            checkpoint: Some(self.checkpoint_path()),
        }
    }

    /// Checks every value and path before any compute starts; creates the
    /// output directory.
    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train_config().validate().map_err(|e| CliError::usage(e.to_string()))?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CliError::usage(format!("val_fraction must be in [0,1), got {}", self.val_fraction)));
        }
        match &self.data {
            DataSource::Synthetic { count, size } => {
                if *count == 0 {
                    return Err(CliError::usage("synthetic image count must be >= 1"));
                }
                if *size < 11 {
                    return Err(CliError::usage(format!("synthetic image size must be >= 11, got {size}")));
                }
            }
            DataSource::Directory(dir) => {
                for sub in ["degraded", "clean"] {
                    if !dir.join(sub).is_dir() {
                        return Err(CliError::usage(format!("{} is not a directory", dir.join(sub).display())));
                    }
                }
            }
        }
        if let Some(parent) = self.checkpoint.as_ref().and_then(|p| p.parent()) {
            if !parent.as_os_str().is_empty() && !parent.is_dir() {
                return Err(CliError::usage(format!("checkpoint directory {} does not exist", parent.display())));
            }
        }
        if self.out.exists() && !self.out.is_dir() {
            return Err(CliError::usage(format!("{} exists and is not a directory", self.out.display())));
        }
        fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        Ok(())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "preset={} ablation={} seed={} epochs={} batch={} lr={:e} beta1={} beta2={} eps={:e} patience={}",
            self.preset,
            self.ablation_name,
            self.seed,
            self.epochs,
            self.batch_size,
            self.adam.lr,
            self.adam.beta1,
            self.adam.beta2,
            self.adam.eps,
            self.patience
        )?;
        for (k, v) in &self.toggles {
            write!(f, " {k}={v}")?;
        }
        match &self.data {
            DataSource::Synthetic { count, size } => write!(f, " data=synthetic:{count}x{size}")?,
            DataSource::Directory(d) => write!(f, " data={}", d.display())?,
        }
        write!(f, " val_fraction={}", self.val_fraction)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_keys_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# run\nepochs = 3   # short\n\nlr=1e-3\nchan_calib = off\nsynthetic = 5\nsize = 16\n").unwrap();
        let mut c = RunConfig::default();
        c.apply_file(&path).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.adam.lr, 1e-3);
        assert_eq!(c.data, DataSource::Synthetic { count: 5, size: 16 });
        assert!(!c.ablation().unwrap().chan_calib);
    }

    #[test]
    fn unknown_key_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        fs::write(&path, "epochs = 3\nepoch = 4\n").unwrap();
        let err = RunConfig::default().apply_file(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains(":2:") && err.to_string().contains("epoch"), "{err}");
    }

    #[test]
    fn defaults_echo_training_settings() {
        let s = RunConfig::default().to_string();
        for part in ["lr=2e-4", "beta1=0.5", "beta2=0.999", "batch=4"] {
            assert!(s.contains(part), "{s}");
        }
    }

    #[test]
    fn attention_without_branch_rejected() {
        let mut c = RunConfig::default();
        c.set("freq_branch", "false").unwrap();
        assert!(c.ablation().is_err());
        c.set("freq_attention", "false").unwrap();
        assert!(c.ablation().is_ok());
    }
}
