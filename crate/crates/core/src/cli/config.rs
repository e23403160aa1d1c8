use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fuser::FuserConfig;
use crate::tasks::{EvalConfig, PretrainConfig, Structure, SyntheticDatasetSpec, TrainConfig, WidthClass};

fn default_structure() -> Structure {
    Structure {
        prior: WidthClass::M,
        canonical: WidthClass::L,
        fused: true,
    }
}

/// Everything a run depends on. The canonical task is
/// `fuser.canonical_index`, an index into `dataset.tasks`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub structure: Structure,
    pub dataset: SyntheticDatasetSpec,
    pub train_fraction: f64,
    pub fuser: FuserConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalConfig,
    /// Not part of the digest.
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            structure: default_structure(),
            dataset: SyntheticDatasetSpec::default(),
            train_fraction: 0.8,
            fuser: FuserConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Canonical task index.
    pub fn canonical(&self) -> usize {
        self.fuser.canonical_index
    }

    /// Checks every section plus cross-section consistency needed to train.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.fuser.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction", "must lie strictly between 0 and 1"));
        }
        if self.fuser.n_tasks != self.dataset.tasks.len() {
            return Err(Error::config(
                "fuser.n_tasks",
                format!("{} but the dataset defines {} tasks", self.fuser.n_tasks, self.dataset.tasks.len()),
            ));
        }
        let width = self.structure.canonical.channels();
        if self.fuser.token_dim != width {
            return Err(Error::config(
                "fuser.token_dim",
                format!(
                    "{} but structure {} gives a canonical width of {width}",
                    self.fuser.token_dim, self.structure
                ),
            ));
        }
        if self.structure.fused && self.structure.prior.channels() > width {
            return Err(Error::Capacity {
                channels: self.structure.prior.channels(),
                width,
            });
        }
        if !(self.eval.far_target > 0.0 && self.eval.far_target < 1.0) {
            return Err(Error::config("eval.far_target", "must lie in (0, 1)"));
        }
        if !(self.eval.cs_tolerance >= 0.0) {
            return Err(Error::config("eval.cs_tolerance", "must be non-negative"));
        }
        Ok(())
    }

    /// SHA-256 of the key-sorted JSON form with `output_dir` removed.
    pub fn digest(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serialises");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        let text = serde_json::to_string(&value).expect("value serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// The same run without a fuser.
    pub fn as_baseline(&self) -> Self {
        Self {
            structure: self.structure.baseline(),
            ..self.clone()
        }
    }

    pub fn fuser_config(&self) -> Option<FuserConfig> {
        self.structure.fused.then(|| self.fuser.clone())
    }
}
