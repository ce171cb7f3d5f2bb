//! Experiment orchestration: grid search, cross-validated noise experiments,
//! and resumable sweeps over model × family × level × protocol.

mod pipeline;
mod store;
mod sweep;

pub use pipeline::{
    run_experiment, run_experiment_logged, run_grid_search, run_grid_search_over, train_holdout, GridCell, GridSearchResult, HoldoutRun,
};
pub use store::ResultStore;
pub use sweep::{run_sweep, SweepConfig, SweepSummary};

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::DatasetError;
use crate::models::{ModelConfig, ModelError, ModelKind, TrainConfig};
use crate::noise::{NoiseError, NoiseFamily, NoiseSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: ModelError,
    },
    #[error("every grid-search cell diverged")]
    GridDiverged,
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("results store {path}: {message}")]
    Store { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Where noise is injected relative to training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Clean,
    NoiseTrainOnly,
    NoiseTestOnly,
    NoiseTrainAndTest,
}

impl Protocol {
    pub const NOISY: [Protocol; 3] = [Protocol::NoiseTrainOnly, Protocol::NoiseTestOnly, Protocol::NoiseTrainAndTest];

    pub fn key(self) -> &'static str {
        match self {
            Protocol::Clean => "clean",
            Protocol::NoiseTrainOnly => "noise_train_only",
            Protocol::NoiseTestOnly => "noise_test_only",
            Protocol::NoiseTrainAndTest => "noise_train_and_test",
        }
    }

    /// Column heading in report tables.
    pub fn title(self) -> &'static str {
        match self {
            Protocol::Clean => "Clean",
            Protocol::NoiseTrainOnly => "Train",
            Protocol::NoiseTestOnly => "Test",
            Protocol::NoiseTrainAndTest => "Train & Test",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Protocol {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "clean" => Ok(Self::Clean),
            "noise_train_only" | "train_only" | "train" => Ok(Self::NoiseTrainOnly),
            "noise_test_only" | "test_only" | "test" => Ok(Self::NoiseTestOnly),
            "noise_train_and_test" | "train_and_test" | "both" => Ok(Self::NoiseTrainAndTest),
            other => Err(HarnessError::Invalid(format!("unknown protocol '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FoldPlan {
    /// One stratified train / validation / test split.
    Single { fractions: [f64; 3] },
    /// Stratified k-fold; fold `f` tests on fold `f` and validates on `f + 1`.
    KFold { k: usize },
}

impl Default for FoldPlan {
    fn default() -> Self {
        FoldPlan::KFold { k: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Absent for the clean protocol.
    pub noise: Option<NoiseSpec>,
    pub protocol: Protocol,
    pub folds: FoldPlan,
    /// Its seed is replaced by a per-fold seed derived from `seed`.
    pub train: TrainConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.protocol == Protocol::Clean && self.noise.is_some() {
            return Err(HarnessError::Invalid("the clean protocol takes no noise spec".into()));
        }
        if let FoldPlan::KFold { k } = self.folds {
            if k < 3 {
                return Err(HarnessError::Invalid(format!(
                    "k-fold needs k >= 3 to leave a training partition, got {k}"
                )));
            }
        }
        Ok(())
    }

    /// Noise that actually applies; a noisy protocol without a spec degenerates to clean.
    pub fn effective_noise(&self) -> Option<&NoiseSpec> {
        match self.protocol {
            Protocol::Clean => None,
            _ => self.noise.as_ref(),
        }
    }

    /// Short stable digest of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cell(&self) -> CellKey {
        let spec = self.effective_noise();
        CellKey {
            model: self.model.kind(),
            family: spec.map(|s| s.family),
            level: spec.map(|s| s.level_percent()),
            protocol: if spec.is_some() { self.protocol } else { Protocol::Clean },
        }
    }
}

/// Coordinates of one sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub model: ModelKind,
    pub family: Option<NoiseFamily>,
    pub level: Option<u8>,
    pub protocol: Protocol,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.family, self.level) {
            (Some(fam), Some(lvl)) => write!(f, "{}/{}/{}/{}", self.model, fam, lvl, self.protocol),
            _ => write!(f, "{}/{}", self.model, self.protocol),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub cell: CellKey,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over folds; 0 for a single fold.
    pub std: f64,
    /// Wall-clock seconds. The only field that varies between identical runs.
    pub runtime_secs: f64,
    pub config_hash: String,
    pub config: ExperimentConfig,
}

impl ExperimentResult {
    pub fn new(config: ExperimentConfig, fold_accuracies: Vec<f64>, runtime_secs: f64) -> Self {
        let (mean, std) = mean_std(&fold_accuracies);
        Self {
            cell: config.cell(),
            config_hash: config.hash(),
            fold_accuracies,
            mean,
            std,
            runtime_secs,
            config,
        }
    }

    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self {
            runtime_secs: 0.0,
            ..self.clone()
        } == Self {
            runtime_secs: 0.0,
            ..other.clone()
        }
    }
}

/// Arithmetic mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Normalize,
    Noise,
    Train,
    Evaluate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessEvent {
    pub fold: usize,
    pub partition: PartitionKind,
    pub stage: Stage,
}

/// Records every read of partition values made by the experiment pipeline.
#[derive(Debug, Default)]
pub struct AccessLog {
    events: Mutex<Vec<AccessEvent>>,
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn record(&self, fold: usize, partition: PartitionKind, stage: Stage) {
        self.events.lock().expect("log lock").push(AccessEvent { fold, partition, stage });
    }

    pub fn events(&self) -> Vec<AccessEvent> {
        self.events.lock().expect("log lock").clone()
    }
}
