//! Whole-pipeline configuration: one JSON document with a section per
//! subsystem. Each training section carries exactly the `TrainConfig` keys.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{MvdError, Result};
use crate::index::{Backend, IndexConfig};
use crate::numeric::fnv1a64;
use crate::segment::SegmentationConfig;
use crate::train::{Stage, TrainConfig};

/// Retrieval evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Cutoffs for recall@K, ascending.
    pub ks: Vec<usize>,
    pub backend: Backend,
    /// Beam breadth for the approximate backend.
    pub ef: usize,
    /// Index the global view alongside local views at inference.
    pub include_global: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![1, 2, 4, 8, 16, 32, 50, 64],
            backend: Backend::Exact,
            ef: 256,
            include_global: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() {
            return Err(MvdError::Validation("eval.ks must be nonempty".into()));
        }
        if self.ks.contains(&0) {
            return Err(MvdError::Validation("eval.ks entries must be >= 1".into()));
        }
        if self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MvdError::Validation(
                "eval.ks must be strictly ascending".into(),
            ));
        }
        if self.ef < 1 {
            return Err(MvdError::Validation("eval.ef must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub segmentation: SegmentationConfig,
    pub encoder: EncoderConfig,
    pub warmup_dual: TrainConfig,
    pub warmup_cross: TrainConfig,
    pub mvd: TrainConfig,
    pub index: IndexConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            segmentation: SegmentationConfig::default(),
            encoder: EncoderConfig::default(),
            warmup_dual: TrainConfig::default_for(Stage::WarmupDual),
            warmup_cross: TrainConfig::default_for(Stage::WarmupCross),
            mvd: TrainConfig::default_for(Stage::Mvd),
            index: IndexConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.segmentation.validate()?;
        self.encoder.validate()?;
        if self.segmentation.vocab_size != self.encoder.vocab_size {
            return Err(MvdError::Validation(format!(
                "segmentation.vocab_size ({}) must equal encoder.vocab_size ({})",
                self.segmentation.vocab_size, self.encoder.vocab_size
            )));
        }
        self.warmup_dual.validate(Stage::WarmupDual)?;
        self.warmup_cross.validate(Stage::WarmupCross)?;
        self.mvd.validate(Stage::Mvd)?;
        self.index.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MvdError::io(path, e))?;
        let cfg: Config = serde_json::from_str(&text).map_err(|e| MvdError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides with dotted paths into the JSON tree,
    /// e.g. `mvd.alpha=0.5` or `eval.ks=[1,8,64]`. Values parse as JSON
    /// first, falling back to a bare string.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut tree = serde_json::to_value(&*self).expect("config serialization cannot fail");
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| {
                MvdError::Validation(format!("override {item:?} is not key=value"))
            })?;
            let value: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let parts: Vec<&str> = key.split('.').collect();
            let (last, init) = parts.split_last().expect("split always yields one part");
            let mut cursor = &mut tree;
            for part in init {
                cursor = cursor.get_mut(*part).ok_or_else(|| {
                    MvdError::Validation(format!("unknown config section in {key:?}"))
                })?;
            }
            let obj = cursor.as_object_mut().ok_or_else(|| {
                MvdError::Validation(format!("override path {key:?} crosses a non-object"))
            })?;
            if !obj.contains_key(*last) {
                return Err(MvdError::Validation(format!("unknown config key {key:?}")));
            }
            obj.insert((*last).to_string(), value);
        }
        *self = serde_json::from_value(tree).map_err(|e| {
            MvdError::Validation(format!("override produced an invalid config: {e}"))
        })?;
        Ok(())
    }

    /// Stable hex fingerprint of the whole configuration.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serialization cannot fail");
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }
}
