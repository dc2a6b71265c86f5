//! Method-by-feature comparisons driven by a TOML file: every listed
//! method is trained on every listed feature set and scored on the same
//! speaker split, and a single report is written.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{emit_report, evaluate_experiment, EvalError, ExperimentResult, Method, ReportFiles};
use crate::features::{read_dataset, split_by_speaker, FeatureError, SplitSpec, UtteranceRecord};
use crate::network::{save_checkpoint, CheckpointError, Model, ModelConfig, NetworkError};
use crate::training::{train_ce, train_ge2e, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("{method} on {feature}: {source}")]
    Train { method: &'static str, feature: String, source: TrainError },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    #[default]
    Standard,
    Compact,
}

impl ModelPreset {
    pub fn config(self, input_dim: usize, num_accents: usize, num_speakers: usize) -> ModelConfig {
        match self {
            ModelPreset::Standard => ModelConfig::standard(input_dim, num_accents, num_speakers),
            ModelPreset::Compact => ModelConfig::compact(input_dim, num_accents, num_speakers),
        }
    }
}

/// One input representation, as a dataset in the portable feature format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    /// Label used in the report, e.g. `BNF`.
    pub name: String,
    pub data: PathBuf,
    /// Separate test dataset; otherwise `split` holds out speakers of `data`.
    #[serde(default)]
    pub test_data: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub output_dir: PathBuf,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    pub split: SplitSpec,
    #[serde(default)]
    pub model: ModelPreset,
    /// Seed of every model's initial weights.
    #[serde(default)]
    pub model_seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    pub features: Vec<FeatureSet>,
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

impl ComparisonConfig {
    /// Parses a TOML file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let fail = |message: String| ExperimentError::Config { path: path.to_path_buf(), message };
        let text = fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
        let mut config: Self = toml::from_str(&text).map_err(|e| fail(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.output_dir = base.join(&config.output_dir);
        for f in &mut config.features {
            f.data = base.join(&f.data);
            f.test_data = f.test_data.as_ref().map(|t| base.join(t));
        }
        config.validate().map_err(|e| fail(e.to_string()))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.methods.is_empty() || self.features.is_empty() {
            return Err(ExperimentError::Invalid("need at least one method and one feature set".into()));
        }
        self.train.validate().map_err(|e| ExperimentError::Invalid(e.to_string()))
    }
}

pub struct ComparisonOutput {
    pub results: Vec<ExperimentResult>,
    pub report: ReportFiles,
}

struct LoadedSet {
    train: Vec<UtteranceRecord>,
    test: Vec<UtteranceRecord>,
    class_names: Vec<String>,
    speakers: usize,
}

fn load_feature_set(set: &FeatureSet, split: SplitSpec) -> Result<LoadedSet, ExperimentError> {
    let (records, summary) = read_dataset(&set.data)?;
    let (train, test) = match &set.test_data {
        Some(dir) => (records, read_dataset(dir)?.0),
        None => split_by_speaker(&records, split)?,
    };
    if test.is_empty() {
        return Err(ExperimentError::Invalid(format!("feature set {} has an empty test split", set.name)));
    }
    Ok(LoadedSet { train, test, class_names: summary.names.class_names, speakers: summary.num_speakers })
}

/// Trains and scores every (feature set, method) pair, saving each model
/// under `output_dir/models/` and the report under `output_dir`.
pub fn run_comparison(config: &ComparisonConfig) -> Result<ComparisonOutput, ExperimentError> {
    config.validate()?;
    let models_dir = config.output_dir.join("models");
    fs::create_dir_all(&models_dir).map_err(|e| ExperimentError::Invalid(format!("{}: {e}", models_dir.display())))?;
    let mut results = Vec::new();
    for set in &config.features {
        let LoadedSet { train, test, class_names, speakers } = load_feature_set(set, config.split)?;
        let dims = train[0].features.dims();
        for &method in &config.methods {
            let mut model = Model::new(config.model.config(dims, class_names.len(), speakers), config.model_seed)?;
            let trained = match method {
                Method::CeAc => train_ce(&train, &mut model, &config.train),
                Method::Ge2eAc => train_ge2e(&train, &mut model, &config.train, false),
                Method::Ge2eAcA => train_ge2e(&train, &mut model, &config.train, true),
            };
            trained.map_err(|source| ExperimentError::Train { method: method.label(), feature: set.name.clone(), source })?;
            let file = format!("{}_{}.ckpt", method.label().to_lowercase(), set.name.to_lowercase().replace(' ', "_"));
            save_checkpoint(&model, &models_dir.join(file))?;
            log::info!("{} on {} done", method.label(), set.name);
            results.push(evaluate_experiment(method, &set.name, &model, &train, &test, class_names.clone())?);
        }
    }
    let report = emit_report(&results, &config.output_dir)?;
    Ok(ComparisonOutput { results, report })
}
