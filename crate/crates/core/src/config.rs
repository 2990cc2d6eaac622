//! Declarative experiment configuration, stored as TOML.
//!
//! ```toml
//! name = "dbn4"
//! kind = "dbn"
//! implementation = "hybrid"
//! layers = [784, 100, 40, 10]
//! seed = 1
//!
//! [training]
//! epochs = 200
//!
//! [[block]]          # optional, one table per RBM in stacking order
//! gain = 2.0
//! ```
//!
//! Unknown keys are rejected everywhere. Relative paths resolve against the
//! directory holding the config file, and `OXDGM_DATA_DIR` overrides the
//! dataset directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::device::DeviceParams;
use crate::dgm::{ModelKind, NetworkSpec};
use crate::error::{Error, Result};
use crate::neuron::{NormalizerConfig, NormalizerLevel, RefMode};
use crate::rbm::{BlockParams, RbmConfig};
use crate::synapse::QuantConfig;

pub const DATA_DIR_ENV: &str = "OXDGM_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Implementation {
    /// Quantized OxRAM synapses, device-derived references, normalizers.
    Hybrid,
    /// Float weights, ideal uniform references, no normalizers.
    Software,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefModeKind {
    IdealUniform,
    DeviceDerived,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub images: String,
    pub labels: String,
    pub n_train: usize,
    pub n_test: usize,
    /// Salt-and-pepper density used when evaluating denoisers.
    pub noise_density: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("../data/mnist"),
            images: "images-idx3-ubyte.gz".into(),
            labels: "labels-idx1-ubyte.gz".into(),
            n_train: 5000,
            n_test: 1000,
            noise_density: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizerSection {
    /// Defaults to on for hybrid runs and off for software runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enabled: Option<bool>,
    pub levels: Vec<NormalizerLevel>,
    pub selected_level: f64,
}

impl Default for NormalizerSection {
    fn default() -> Self {
        let n = NormalizerConfig::default();
        Self {
            enabled: None,
            levels: n.levels,
            selected_level: n.selected_level,
        }
    }
}

/// Per-block overrides of the global settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_mode: Option<RefModeKind>,
    /// Replaces the whole `[training]` table for this block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<RbmConfig>,
    /// Normalizer operating point on this block's output interface.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalizer_level: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: ModelKind,
    pub implementation: Implementation,
    pub layers: Vec<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads for evaluation. Results do not depend on it.
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Default gain of a block is `gain_scale / sqrt(fan_in)`.
    #[serde(default = "default_gain_scale")]
    pub gain_scale: f64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub device: DeviceParams,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub training: RbmConfig,
    #[serde(default)]
    pub normalizer: NormalizerSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub block: Vec<BlockOverride>,
}

fn default_seed() -> u64 {
    1
}

fn default_threads() -> usize {
    1
}

fn default_gain_scale() -> f64 {
    28.0
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if !(self.gain_scale.is_finite() && self.gain_scale > 0.0) {
            return Err(Error::Config("gain_scale must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.data.noise_density) {
            return Err(Error::Config("data.noise_density must be in [0, 1]".into()));
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::Config("data.n_train and data.n_test must be >= 1".into()));
        }
        if self.layers.len() >= 2 && self.block.len() > self.layers.len() - 1 {
            return Err(Error::Config(format!(
                "{} [[block]] tables for {} blocks",
                self.block.len(),
                self.layers.len() - 1
            )));
        }
        self.device.validate()?;
        if self.implementation == Implementation::Hybrid {
            self.quant.validate()?;
        }
        self.network_spec()?.validate()
    }

    pub fn normalizers_enabled(&self) -> bool {
        self.normalizer
            .enabled
            .unwrap_or(self.implementation == Implementation::Hybrid)
    }

    fn overrides(&self, l: usize) -> BlockOverride {
        self.block.get(l).cloned().unwrap_or_default()
    }

    /// Resolves the config into a model architecture.
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        if self.layers.len() < 2 {
            return Err(Error::Config("layers needs at least two entries".into()));
        }
        let hybrid = self.implementation == Implementation::Hybrid;
        let blocks = self
            .layers
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let o = self.overrides(l);
                let default_mode = if hybrid { RefModeKind::DeviceDerived } else { RefModeKind::IdealUniform };
                let ref_mode = match o.ref_mode.unwrap_or(default_mode) {
                    RefModeKind::IdealUniform => RefMode::IdealUniform,
                    RefModeKind::DeviceDerived => RefMode::DeviceDerived(self.device.clone()),
                };
                BlockParams {
                    n_visible: w[0],
                    n_hidden: w[1],
                    rbm: o.training.unwrap_or_else(|| self.training.clone()),
                    quant: hybrid.then(|| self.quant.clone()),
                    gain: o.gain.unwrap_or(self.gain_scale / (w[0] as f64).sqrt()),
                    ref_mode,
                    storage: self.device.clone(),
                }
            })
            .collect::<Vec<_>>();
        let normalizers = (0..blocks.len() - 1)
            .map(|l| {
                self.normalizers_enabled().then(|| NormalizerConfig {
                    levels: self.normalizer.levels.clone(),
                    selected_level: self
                        .overrides(l)
                        .normalizer_level
                        .unwrap_or(self.normalizer.selected_level),
                })
            })
            .collect();
        Ok(NetworkSpec {
            kind: self.kind,
            layer_sizes: self.layers.clone(),
            blocks,
            normalizers,
        })
    }

    /// Image and label paths, honouring the dataset-root override.
    pub fn data_paths(&self, config_dir: &Path) -> (PathBuf, PathBuf) {
        let dir = match std::env::var_os(DATA_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => config_dir.join(&self.data.dir),
        };
        (dir.join(&self.data.images), dir.join(&self.data.labels))
    }
}
