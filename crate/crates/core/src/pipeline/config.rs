//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::SyntheticCorpusSpec;
use crate::backend::{CsmlOptions, PldaBackendOptions};
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::models::{MaxPoolWidths, NetworkSpec, ResNetWidths};
use crate::objectives::{LossKind, MarginConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    Maxpool {
        #[serde(default)]
        widths: MaxPoolWidths,
    },
    Resnet {
        blocks: usize,
        #[serde(default)]
        widths: ResNetWidths,
    },
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::Maxpool { widths: MaxPoolWidths::default() }
    }
}

impl ModelConfig {
    pub fn build_spec(&self, n_spk: usize, in_dim: usize) -> Result<NetworkSpec> {
        match self {
            Self::Maxpool { widths } => NetworkSpec::maxpool(n_spk, in_dim, widths),
            Self::Resnet { blocks, widths } => NetworkSpec::resnet(*blocks, n_spk, in_dim, widths),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Learning rate is multiplied by `lr_decay` every `lr_decay_epochs`.
    pub lr_decay: f64,
    pub lr_decay_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Defaults to `usable utterances / batch_size` (at least 1).
    pub steps_per_epoch: Option<usize>,
    pub segment_seconds: (f64, f64),
    /// Rescales the gradient when its global norm exceeds this value.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay: 0.5,
            lr_decay_epochs: 10,
            batch_size: 32,
            epochs: 10,
            steps_per_epoch: None,
            segment_seconds: (3.0, 10.0),
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.segment_seconds;
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.lr_decay > 0.0
            && self.lr_decay_epochs >= 1
            && self.batch_size >= 1
            && lo > 0.0
            && hi >= lo
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if !ok {
            return Err(Error::Config(format!("invalid training settings {self:?}")));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_epochs) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Cosine,
    Csml,
    LdaPlda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Subtract the training-set mean before cosine or CSML scoring.
    pub center: bool,
    /// Fraction of training speakers held back for CSML model selection.
    pub csml_validation_fraction: f64,
    pub csml: CsmlOptions,
    pub plda: PldaBackendOptions,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Cosine,
            center: true,
            csml_validation_fraction: 0.25,
            csml: CsmlOptions::default(),
            plda: PldaBackendOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub train_features: Option<PathBuf>,
    pub eval_features: Option<PathBuf>,
    pub trials: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub loss: LossKind,
    pub train: TrainConfig,
    pub backend: BackendConfig,
    pub corpus: SyntheticCorpusSpec,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            model: ModelConfig::default(),
            loss: LossKind::Asoftmax(MarginConfig::default()),
            train: TrainConfig::default(),
            backend: BackendConfig::default(),
            corpus: SyntheticCorpusSpec::default(),
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct HashedPart<'a> {
    model: &'a ModelConfig,
    loss: &'a LossKind,
    train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        if !(0.0..1.0).contains(&self.backend.csml_validation_fraction) {
            return Err(Error::Config("csml_validation_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// SHA-256 over the settings that shape a training trajectory. The epoch
    /// count is left out so a run can be extended from its last checkpoint.
    pub fn training_hash(&self) -> String {
        let part = HashedPart { model: &self.model, loss: &self.loss, train: TrainConfig { epochs: 0, ..self.train.clone() } };
        let text = toml::to_string(&part).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
