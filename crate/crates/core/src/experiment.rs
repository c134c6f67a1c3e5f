//! Experiment configuration file and the end-to-end source → adapt → evaluate pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_image_folder, make_blob_shift, make_two_moons_shift, BlobShift, LabeledDataset};
use crate::error::{Result, UfalError};
use crate::model::{Activation, Architecture, ModelBundle};
use crate::trainer::{adapt, evaluate, train_source, AdaptationTrace, Metric, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    TwoMoons {
        n_per_domain: usize,
        rotation_degrees: f64,
        noise: f64,
        /// Defaults to the training seed.
        seed: Option<u64>,
    },
    Blobs {
        n_classes: usize,
        n_per_class: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        mean_shift: f64,
        covariance_scale: f64,
        #[serde(default = "default_spread")]
        spread: f64,
        seed: Option<u64>,
    },
    ImageFolder {
        root: PathBuf,
        source_domain: String,
        target_domain: String,
        #[serde(default = "default_resolution")]
        resolution: u32,
    },
}

fn default_dim() -> usize {
    2
}

fn default_spread() -> f64 {
    8.0
}

fn default_resolution() -> u32 {
    crate::data::DEFAULT_IMAGE_RESOLUTION
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::TwoMoons {
            n_per_domain: 500,
            rotation_degrees: 45.0,
            noise: 0.1,
            seed: None,
        }
    }
}

impl DatasetConfig {
    /// `(source, target)`; target labels are only used for evaluation.
    pub fn build(&self, run_seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DatasetConfig::TwoMoons {
                n_per_domain,
                rotation_degrees,
                noise,
                seed,
            } => make_two_moons_shift(*n_per_domain, *rotation_degrees, *noise, seed.unwrap_or(run_seed)),
            DatasetConfig::Blobs {
                n_classes,
                n_per_class,
                dim,
                mean_shift,
                covariance_scale,
                spread,
                seed,
            } => make_blob_shift(&BlobShift {
                n_classes: *n_classes,
                n_per_class: *n_per_class,
                dim: *dim,
                mean_shift: *mean_shift,
                covariance_scale: *covariance_scale,
                spread: *spread,
                seed: seed.unwrap_or(run_seed),
            }),
            DatasetConfig::ImageFolder {
                root,
                source_domain,
                target_domain,
                resolution,
            } => {
                let source = load_image_folder(root, source_domain, *resolution)?;
                let target = load_image_folder(root, target_domain, *resolution)?;
                if source.class_names != target.class_names {
                    return Err(UfalError::InvalidArgument(
                        "source and target domains have different class folders".into(),
                    ));
                }
                Ok((source, target))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub batch_norm: bool,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            activation: Activation::Relu,
            batch_norm: true,
            bn_momentum: crate::ghost_bn::DEFAULT_MOMENTUM,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, input_dim: usize, n_classes: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            n_classes,
            activation: self.activation,
            batch_norm: self.batch_norm,
            bn_momentum: self.bn_momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Row identifiers; empty means every row.
    pub rows: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            rows: Vec::new(),
        }
    }
}

/// Top-level configuration document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| UfalError::InvalidArgument(e.to_string()))?;
        config.train.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }

    pub fn datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        self.dataset.build(self.train.seed)
    }

    pub fn new_model(&self, source: &LabeledDataset) -> Result<ModelBundle> {
        let arch = self.model.architecture(source.input_dim(), source.n_classes());
        ModelBundle::new(arch, self.train.seed)
    }
}

/// Outcome of one source → adapt run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub source_only_accuracy: f64,
    pub accuracy: f64,
    pub mean_class_accuracy: f64,
    pub trace: AdaptationTrace,
    pub model: ModelBundle,
}

pub fn run_pipeline(config: &ExperimentConfig) -> Result<RunOutcome> {
    let (source, target) = config.datasets()?;
    let mut model = config.new_model(&source)?;
    train_source(&mut model, &source, &config.train)?;
    let source_only_accuracy = evaluate(&model, &target, Metric::Accuracy)?;
    let trace = adapt(&mut model, &source, &target.unlabeled(), &config.train, Some(&target))?;
    Ok(RunOutcome {
        source_only_accuracy,
        accuracy: evaluate(&model, &target, Metric::Accuracy)?,
        mean_class_accuracy: evaluate(&model, &target, Metric::MeanClassAccuracy)?,
        trace,
        model,
    })
}
