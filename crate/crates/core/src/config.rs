//! Run configuration: one TOML file covering training, backbone, data,
//! loss, and metric options. Missing keys take their defaults; unknown keys
//! are rejected.

use crate::data::{FilterSpec, SynthSpec};
use crate::engine::{Settings, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::MetricsOptions;
use crate::model::BackboneSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Where datasets come from. Unset paths mean the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Patch folder with a `manifest.csv`.
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub backbone: BackboneSpec,
    pub synth: SynthSpec,
    pub test_synth: SynthSpec,
    pub filter: FilterSpec,
    pub loss: LossConfig,
    pub metrics: MetricsOptions,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            out_dir: PathBuf::from("runs"),
            train: TrainConfig::default(),
            backbone: BackboneSpec::default(),
            synth: SynthSpec::default(),
            test_synth: SynthSpec {
                count_pos: 100,
                count_neg: 100,
                seed: 1,
                ..SynthSpec::default()
            },
            filter: FilterSpec::default(),
            loss: LossConfig::default(),
            metrics: MetricsOptions::default(),
            data: DataConfig::default(),
        }
    }
}

fn keyed(key: &str, e: Error) -> Error {
    match e {
        Error::Parse { .. } => e,
        other => Error::Parse {
            key: key.to_string(),
            message: other.to_string(),
        },
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.backbone.resolved_plan().map_err(|e| keyed("backbone", e))?;
        self.synth.validate().map_err(|e| keyed("synth", e))?;
        self.test_synth.validate().map_err(|e| keyed("test_synth", e))?;
        self.filter.validate().map_err(|e| keyed("filter", e))?;
        self.loss.validate().map_err(|e| keyed("loss", e))?;
        self.metrics.validate().map_err(|e| keyed("metrics", e))?;
        if self.filter.target_size != self.backbone.input_size {
            return Err(Error::Parse {
                key: "filter.target_size".into(),
                message: format!(
                    "patches are resized to {} but backbone.input_size is {}",
                    self.filter.target_size, self.backbone.input_size
                ),
            });
        }
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(Error::Parse {
                key: "run_name".into(),
                message: "must be a non-empty file name".into(),
            });
        }
        Ok(())
    }

    pub fn settings(&self) -> Settings {
        Settings::new(self.train.clone(), self.loss.clone(), self.metrics.clone())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// SHA-256 of the canonical TOML echo.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_name)
    }

    /// Writes `config.toml` and `manifest.json` into `dir`.
    pub fn write_echo(&self, dir: &Path) -> Result<RunManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = self.to_toml()?;
        let path = dir.join(CONFIG_ECHO);
        std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        let manifest = RunManifest {
            run_name: self.run_name.clone(),
            seed: self.train.seed,
            config_hash: hex::encode(Sha256::digest(text.as_bytes())),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

pub const CONFIG_ECHO: &str = "config.toml";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_name: String,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
}

/// Parses and validates a config string.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
        key: String::new(),
        message: e.message().to_string(),
    })?;
    let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let key = e.path().to_string();
        Error::Parse {
            key: if key == "." { String::new() } else { key },
            message: e.into_inner().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}
