//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::BlurSpec;
use crate::error::{Error, Result};
use crate::loss::{LossWeights, MarginMode};
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::train::{OptimConfig, TrainMode, TrainSetup};

/// Overrides `run.output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "SAGE_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub tau: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub kernel_size: [usize; 2],
    pub sigma: f64,
    pub margin_mode: MarginMode,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        let b = BlurSpec::default();
        Self {
            tau: w.tau,
            lambda: w.lambda,
            alpha: w.alpha,
            epsilon: w.epsilon,
            kernel_size: [b.kernel_size.0, b.kernel_size.1],
            sigma: b.sigma,
            margin_mode: MarginMode::default(),
        }
    }
}

impl LossSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            tau: self.tau,
            lambda: self.lambda,
            alpha: self.alpha,
            epsilon: self.epsilon,
        }
    }

    pub fn blur(&self) -> BlurSpec {
        BlurSpec {
            kernel_size: (self.kernel_size[0], self.kernel_size[1]),
            sigma: self.sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub modes: Vec<TrainMode>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            modes: TrainMode::ALL.to_vec(),
            seeds: (0..5).collect(),
            output_dir: PathBuf::from("sage-output"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: SynthConfig,
    pub model: ModelConfig,
    pub loss: LossSection,
    pub optim: OptimConfig,
    pub run: RunSection,
}

fn in_section(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidParameter { field, reason } => Error::InvalidParameter {
            field: format!("{section}.{field}"),
            reason,
        },
        other => other,
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate().map_err(|e| in_section("dataset", e))?;
        self.model.validate().map_err(|e| in_section("model", e))?;
        self.loss.weights().validate().map_err(|e| in_section("loss", e))?;
        self.loss.blur().validate().map_err(|e| in_section("loss", e))?;
        self.optim.validate().map_err(|e| in_section("optim", e))?;
        if self.run.modes.is_empty() {
            return Err(Error::invalid("run.modes", "must list at least one mode"));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::invalid("run.seeds", "must list at least one seed"));
        }
        if self.model.num_classes != 2 {
            return Err(Error::invalid("model.num_classes", "the synthetic task is binary"));
        }
        if self.model.in_channels != 1 {
            return Err(Error::invalid("model.in_channels", "synthetic images are grayscale"));
        }
        Ok(())
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            model: self.model.clone(),
            weights: self.loss.weights(),
            blur: self.loss.blur(),
            margin_mode: self.loss.margin_mode,
            optim: self.optim.clone(),
        }
    }

    /// Output root, honoring the environment override.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.run.output_dir.clone(),
        }
    }
}

/// Directory layout under an output root.
#[derive(Clone, Debug)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run_dir(&self, mode: TrainMode, seed: u64) -> PathBuf {
        self.runs_dir().join(mode.as_str()).join(seed.to_string())
    }

    pub fn ablation_dir(&self) -> PathBuf {
        self.root.join("ablation")
    }
}
