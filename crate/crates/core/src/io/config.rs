//! TOML run configuration with strict key checking.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DirectionPlan, ModelConfig};
use crate::training::TrainConfig;

/// Where the layers stop attending causally. `None` means only the last
/// layer is bi-directional.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub turning_point: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub triplets: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub sentences: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
}

/// Everything a run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub plan: PlanConfig,
    pub train: TrainConfig,
    pub data: DataPaths,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            plan: PlanConfig::default(),
            train: TrainConfig::default(),
            data: DataPaths::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let bytes = super::datasets::read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.plan()?;
        Ok(())
    }

    /// The attention plan for the configured model depth.
    pub fn plan(&self) -> Result<DirectionPlan> {
        let n = self.model.n_layers;
        match self.plan.turning_point {
            Some(t) => DirectionPlan::new(n, t),
            None => DirectionPlan::last_bi(n),
        }
    }
}

/// Stable short digest of any serialisable configuration.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value).map_err(|e| Error::Config(e.to_string()))?;
    let digest = Sha256::digest(&json);
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        write!(out, "{b:02x}").unwrap();
    }
    Ok(out)
}
