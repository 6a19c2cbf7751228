//! Declarative training configuration.
//!
//! ```toml
//! train = "data/train.conllu"     # required
//! dev = "data/dev.conllu"         # optional; the training set is monitored without it
//! output = "model.ckpt"           # best checkpoint is written here
//! seed = 7                        # optional; falls back to $G2GT_SEED, then 0
//! epochs = 100
//! batch_size = 8
//! lr = 0.001
//! t_train = 2
//! t_max = 3
//! early_stop_las = 100.0          # optional; stop once the monitored LAS reaches this
//!
//! [model]
//! d_model = 64
//! heads = 4
//! d_ff = 256
//! layers = 2
//! d_edge = 64
//! max_len = 128
//! use_key_term = true
//! use_value_term = true
//! frozen_none = false
//! unlabeled_input = false
//! single_root = true
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use g2gt_core::attention::G2GConfig;
use g2gt_core::model::{ModelConfig, Task};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEED_ENV: &str = "G2GT_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub d_edge: usize,
    pub max_len: usize,
    pub use_key_term: bool,
    pub use_value_term: bool,
    pub frozen_none: bool,
    pub unlabeled_input: bool,
    pub single_root: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            d_model: 64,
            heads: 4,
            d_ff: 256,
            layers: 2,
            d_edge: 64,
            max_len: 128,
            use_key_term: true,
            use_value_term: true,
            frozen_none: false,
            unlabeled_input: false,
            single_root: true,
        }
    }
}

impl ModelSpec {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let mut encoder = G2GConfig::new(self.d_model, self.heads, self.d_ff, self.layers);
        encoder.use_key_term = self.use_key_term;
        encoder.use_value_term = self.use_value_term;
        encoder.frozen_none = self.frozen_none;
        ModelConfig {
            vocab_size,
            max_len: self.max_len,
            encoder,
            d_edge: self.d_edge,
            task: Task::Dependency {
                single_root: self.single_root,
            },
            unlabeled_input: self.unlabeled_input,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 || self.layers == 0 {
            return bad("d_model, heads, d_ff and layers must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.d_edge == 0 || self.d_edge > self.d_model {
            return bad(format!("d_edge must be in 1..={}", self.d_model));
        }
        if self.max_len < 2 {
            return bad("max_len must leave room for the root and one token".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub train: PathBuf,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_t_train")]
    pub t_train: usize,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default)]
    pub early_stop_las: Option<f64>,
    #[serde(default)]
    pub model: ModelSpec,
}

fn default_output() -> PathBuf {
    PathBuf::from("model.ckpt")
}
fn default_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-3
}
fn default_t_train() -> usize {
    2
}
fn default_t_max() -> usize {
    3
}

impl TrainConfig {
    /// Defaults for everything but the training file.
    pub fn new(train: impl Into<PathBuf>) -> Self {
        TrainConfig {
            train: train.into(),
            dev: None,
            output: default_output(),
            seed: None,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            t_train: default_t_train(),
            t_max: default_t_max(),
            early_stop_las: None,
            model: ModelSpec::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: TrainConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            let resolve = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            resolve(&mut cfg.train);
            resolve(&mut cfg.output);
            if let Some(dev) = cfg.dev.as_mut() {
                resolve(dev);
            }
        }
        Ok(cfg)
    }

    /// The configured seed, else `$G2GT_SEED`, else 0.
    pub fn resolved_seed(&self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be a positive number".into()));
        }
        if self.t_train == 0 || self.t_max == 0 {
            return Err(Error::Config("t_train and t_max must be at least 1".into()));
        }
        Ok(())
    }
}
