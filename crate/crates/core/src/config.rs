//! Flat run configuration shared by the command-line tools.
//!
//! Every key has a default, files may set any subset, and `key=value`
//! overrides are applied on top before validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{DfscReduction, LossWeights, NormalizeOrder};
use crate::nets::{ModelConfig, PdnConfig, StudentHeads};
use crate::scorer::Projection;
use crate::trainer::{EmaMode, TrainConfig};

pub const DATA_ROOT_ENV: &str = "LOGAD_DATA_ROOT";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,

    pub out_channels: usize,
    pub widths: [usize; 3],
    pub ae_width: usize,
    pub student_heads: StudentHeads,

    pub iterations: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_beta2: f64,
    pub lr_drop_fraction: f64,
    pub lr_drop_factor: f64,
    pub ema_momentum: f64,
    pub ema_mode: EmaMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: u64,
    pub teacher_standardize: bool,

    pub alpha: f64,
    pub margin: f64,
    pub q_ts: f64,
    pub q_ta: f64,
    pub dfsc_reduction: DfscReduction,
    pub normalize_order: NormalizeOrder,
    pub sa_detach_autoencoder: bool,

    /// Instance normalization and the decoder-opening ReLU in the auto-encoder.
    pub instance_norm_relu: bool,
    pub sigmoid_projection: bool,
    pub dfsc: bool,
    /// EMA student for scoring; off means the online student is used.
    pub momentum_update: bool,

    pub pretrain_iterations: u64,
    pub pretrain_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let w = LossWeights::default();
        let m = ModelConfig::desk();
        RunConfig {
            seed: 0,
            image_size: m.image_size,
            out_channels: m.pdn.out_channels,
            widths: m.pdn.widths,
            ae_width: m.ae_width,
            student_heads: m.student_heads,
            iterations: t.iterations,
            lr: t.lr,
            weight_decay: t.weight_decay,
            warmup_beta2: t.warmup_beta2,
            lr_drop_fraction: t.lr_drop_fraction,
            lr_drop_factor: t.lr_drop_factor,
            ema_momentum: t.ema_momentum,
            ema_mode: t.ema_mode,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            checkpoint_every: t.checkpoint_every,
            teacher_standardize: t.teacher_standardize,
            alpha: w.alpha,
            margin: w.margin,
            q_ts: w.q_ts,
            q_ta: w.q_ta,
            dfsc_reduction: w.dfsc_reduction,
            normalize_order: w.normalize_order,
            sa_detach_autoencoder: w.sa_detach_autoencoder,
            instance_norm_relu: true,
            sigmoid_projection: true,
            dfsc: true,
            momentum_update: true,
            pretrain_iterations: 2000,
            pretrain_lr: 1e-4,
        }
    }
}

impl RunConfig {
    /// 64 x 64 inputs and 32 feature channels.
    pub fn fast() -> Self {
        RunConfig {
            image_size: 64,
            out_channels: 32,
            ..Self::default()
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            pdn: PdnConfig {
                in_channels: 3,
                out_channels: self.out_channels,
                widths: self.widths,
            },
            ae_width: self.ae_width,
            image_size: self.image_size,
            instance_norm: self.instance_norm_relu,
            student_heads: self.student_heads,
            seed: self.seed,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            margin: self.margin,
            q_ts: self.q_ts,
            q_ta: self.q_ta,
            dfsc: self.dfsc,
            dfsc_reduction: self.dfsc_reduction,
            normalize_order: self.normalize_order,
            sa_detach_autoencoder: self.sa_detach_autoencoder,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            iterations: self.iterations,
            warmup_beta2: self.warmup_beta2,
            lr_drop_fraction: self.lr_drop_fraction,
            lr_drop_factor: self.lr_drop_factor,
            ema_momentum: self.ema_momentum,
            ema_mode: if self.momentum_update { self.ema_mode } else { EmaMode::Off },
            batch_size: 1,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            checkpoint_every: self.checkpoint_every,
            teacher_standardize: self.teacher_standardize,
            weights: self.weights(),
            seed: self.seed,
        }
    }

    pub fn projection(&self) -> Projection {
        if self.sigmoid_projection {
            Projection::Sigmoid
        } else {
            Projection::Linear
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train().validate()
    }

    /// Parses a TOML document, applies `key=value` overrides and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            table.insert(key.trim().to_string(), parse_value(value.trim()));
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults when `None`) plus overrides.
    pub fn load(path: Option<&Path>, base: RunConfig, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => read_config_file(p)?,
            None => String::new(),
        };
        let mut table: toml::Table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        let file: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", display(path))))?;
        table.extend(file);
        let merged = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml_with_overrides(&merged, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn display(path: Option<&Path>) -> String {
    path.map(|p| p.display().to_string()).unwrap_or_else(|| "<defaults>".into())
}

/// Missing configuration files are configuration errors, not I/O failures.
pub fn read_config_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
        _ => Error::io(path, e),
    })
}

/// TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Data directory from an explicit path or the environment.
pub fn resolve_data_dir(explicit: Option<&Path>) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p.to_path_buf()),
        None => std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("no data directory given and {DATA_ROOT_ENV} is unset"))),
    }
}
