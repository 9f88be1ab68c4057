//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/basic_cnn"
//! max_epochs = 200
//! patience = 5
//! checkpoint_every = 10
//!
//! [corpus]
//! manifest = "corpus/manifest.jsonl"
//! cache_dir = "cache"
//!
//! [model]
//! kind = "BasicCNN"
//! crop_width = 64
//! filter_size = 4
//! num_filters = 32
//! batch_size = 64
//! learning_rate = 0.001
//! ```
//!
//! Relative paths are resolved against the working directory by the caller.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::wav::SAMPLE_RATE;
use crate::error::{Error, Result};
use crate::eval::early_stop::{DEFAULT_MAX_EPOCHS, DEFAULT_PATIENCE};
use crate::model::{ModelConfig, ModelKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    pub manifest: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub corpus: CorpusPaths,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Checkpoint every this many epochs; 0 keeps only the final best weights.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Upper edge of the band layout. Only the Nyquist frequency is supported.
    #[serde(default = "default_band_max_hz")]
    pub band_max_hz: f64,
    /// Inference chunk size.
    #[serde(default = "default_eval_chunk")]
    pub eval_chunk: usize,
}

fn default_seed() -> u64 {
    7
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_max_epochs() -> usize {
    DEFAULT_MAX_EPOCHS
}

fn default_patience() -> usize {
    DEFAULT_PATIENCE
}

fn default_band_max_hz() -> f64 {
    SAMPLE_RATE as f64 / 2.0
}

fn default_eval_chunk() -> usize {
    64
}

impl RunConfig {
    pub fn new(model: ModelConfig, manifest: impl Into<PathBuf>) -> Self {
        Self {
            model,
            corpus: CorpusPaths {
                manifest: manifest.into(),
                cache_dir: None,
            },
            seed: default_seed(),
            output_dir: default_output_dir(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            checkpoint_every: 0,
            band_max_hz: default_band_max_hz(),
            eval_chunk: default_eval_chunk(),
        }
    }

    /// Desk-scale defaults for `kind`.
    pub fn desk(kind: ModelKind, manifest: impl Into<PathBuf>) -> Self {
        Self::new(ModelConfig::desk(kind), manifest)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.max_epochs == 0 || self.patience == 0 || self.eval_chunk == 0 {
            return Err(Error::Config("max_epochs, patience and eval_chunk must be positive".into()));
        }
        let nyquist = default_band_max_hz();
        if (self.band_max_hz - nyquist).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "band_max_hz {} unsupported: 16 kHz audio covers 0 to {nyquist} Hz",
                self.band_max_hz
            )));
        }
        Ok(())
    }

    /// Resolves relative paths against `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus.manifest);
        if let Some(c) = &mut self.corpus.cache_dir {
            fix(c);
        }
        fix(&mut self.output_dir);
    }
}
