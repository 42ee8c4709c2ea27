use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate of the last epoch as a fraction of `lr`; the rate falls
    /// linearly per epoch. 1 keeps it constant.
    #[serde(default = "one")]
    pub final_lr_fraction: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            final_lr_fraction: 1.0,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::config("train.final_lr_fraction", "must be in (0, 1]"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::config("train.grad_clip", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            test: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

/// Everything needed to reproduce a training or evaluation run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn prefix_field(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config {
            field: format!("{section}.{field}"),
            reason,
        },
        other => other,
    }
}

impl RunConfig {
    /// Parses TOML on top of the defaults. `model.preset` selects a named
    /// model configuration that the remaining `model` keys then override.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut user: toml::Table =
            toml::from_str(s).map_err(|e| Error::config("config", e.to_string()))?;
        let mut base = RunConfig::default();
        if let Some(toml::Value::Table(model)) = user.get_mut("model") {
            if let Some(p) = model.remove("preset") {
                let name = p
                    .as_str()
                    .ok_or_else(|| Error::config("model.preset", "must be a string"))?;
                base.model = ModelConfig::preset(name)
                    .ok_or_else(|| Error::config("model.preset", format!("unknown preset `{name}`")))?;
            }
        }
        let mut table =
            toml::Table::try_from(&base).map_err(|e| Error::config("config", e.to_string()))?;
        merge(&mut table, user);
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| prefix_field("model", e))?;
        self.loss.validate().map_err(|e| prefix_field("loss", e))?;
        self.train.validate()?;
        self.eval.validate().map_err(|e| prefix_field("eval", e))?;
        Ok(())
    }
}
