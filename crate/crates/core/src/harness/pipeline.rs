use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    AccessLog, ExperimentConfig, ExperimentResult, FoldPlan, HarnessError, PartitionKind, Protocol, Result, Stage,
};
use crate::dataset::{kfold, split, Dataset, MinMaxScaler, Partition, Series};
use crate::models::{train, ModelConfig, ModelError, SeriesSet, TrainConfig, TrainedModel};
use crate::noise::{self, NoiseSpec};
use crate::seed;
use crate::tensor::{OptimizerKind, LEARNING_RATE_GRID};

/// Fractions of the grid-search split.
const GRID_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

fn note(log: Option<&AccessLog>, fold: usize, partition: PartitionKind, stage: Stage) {
    if let Some(log) = log {
        log.record(fold, partition, stage);
    }
}

pub(crate) fn partitions(dataset: &Dataset, plan: &FoldPlan, master: u64) -> Result<Vec<Partition>> {
    let s = seed::derive(master, &[seed::tag("partition")]);
    Ok(match plan {
        FoldPlan::Single { fractions } => vec![split(dataset, *fractions, s)?],
        FoldPlan::KFold { k } => kfold(dataset, *k, s)?,
    })
}

/// Scaled clean series of one partition plus the dataset indices they came from.
pub(crate) struct Part {
    pub series: Vec<Series>,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

impl Part {
    fn set(&self) -> Result<SeriesSet> {
        Ok(SeriesSet::new(self.series.iter().zip(&self.labels).map(|(s, &l)| (s, l)))?)
    }
}

/// The test partition stays raw until final evaluation opens it.
struct SealedTest {
    ids: Vec<usize>,
}

pub(crate) struct PreparedFold<'a> {
    pub fold: usize,
    dataset: &'a Dataset,
    scaler: MinMaxScaler,
    pub train: Part,
    pub val: Part,
    test: SealedTest,
}

impl<'a> PreparedFold<'a> {
    /// Fits the scaler on the clean training partition and scales train and validation.
    pub fn new(dataset: &'a Dataset, partition: &Partition, fold: usize, log: Option<&AccessLog>) -> Result<Self> {
        if partition.train.is_empty() || partition.validation.is_empty() || partition.test.is_empty() {
            return Err(HarnessError::Invalid(format!("fold {fold} has an empty partition")));
        }
        note(log, fold, PartitionKind::Train, Stage::Normalize);
        let samples = dataset.samples();
        let scaler = MinMaxScaler::fit(partition.train.iter().map(|&i| &samples[i].series));
        let scale = |ids: &[usize]| Part {
            series: ids.iter().map(|&i| scaler.transform(&samples[i].series)).collect(),
            labels: ids.iter().map(|&i| samples[i].label).collect(),
            ids: ids.to_vec(),
        };
        let (train, val) = (scale(&partition.train), scale(&partition.validation));
        Ok(Self {
            fold,
            dataset,
            train,
            val,
            test: SealedTest {
                ids: partition.test.clone(),
            },
            scaler,
        })
    }

    fn open_test(&self, log: Option<&AccessLog>) -> Part {
        note(log, self.fold, PartitionKind::Test, Stage::Evaluate);
        let samples = self.dataset.samples();
        Part {
            series: self.test.ids.iter().map(|&i| self.scaler.transform(&samples[i].series)).collect(),
            labels: self.test.ids.iter().map(|&i| samples[i].label).collect(),
            ids: self.test.ids.clone(),
        }
    }
}

fn partition_tag(p: PartitionKind) -> u64 {
    match p {
        PartitionKind::Train => 0,
        PartitionKind::Validation => 1,
        PartitionKind::Test => 2,
    }
}

/// Noisy copies; each sample's noise seed depends on the spec seed, the fold,
/// the partition, and the sample's dataset index.
fn corrupt(part: &Part, spec: &NoiseSpec, fold: usize, which: PartitionKind) -> Result<Vec<Series>> {
    part.series
        .iter()
        .zip(&part.ids)
        .map(|(s, &id)| {
            let sample_seed = seed::derive(spec.seed, &[fold as u64, partition_tag(which), id as u64]);
            Ok(noise::apply(s, &spec.with_seed(sample_seed))?)
        })
        .collect()
}

pub(crate) fn fold_train_config(cfg: &ExperimentConfig, fold: usize) -> TrainConfig {
    TrainConfig {
        seed: seed::derive(cfg.seed, &[seed::tag("train"), seed::tag(cfg.model.kind().key()), fold as u64]),
        ..cfg.train.clone()
    }
}

/// True when this experiment trains on clean data, so its model equals the clean baseline's.
pub(crate) fn trains_clean(cfg: &ExperimentConfig) -> bool {
    matches!(
        (cfg.effective_noise(), cfg.protocol),
        (None, _) | (Some(_), Protocol::NoiseTestOnly)
    )
}

fn with_fold(fold: usize) -> impl Fn(ModelError) -> HarnessError {
    move |source| HarnessError::Fold { fold, source }
}

pub(crate) fn fit_fold(cfg: &ExperimentConfig, fold: &PreparedFold<'_>, log: Option<&AccessLog>) -> Result<TrainedModel> {
    let f = fold.fold;
    let tc = fold_train_config(cfg, f);
    let (train_set, val_set) = match (cfg.effective_noise(), cfg.protocol) {
        (Some(spec), Protocol::NoiseTrainOnly) => {
            note(log, f, PartitionKind::Train, Stage::Noise);
            let noisy = corrupt(&fold.train, spec, f, PartitionKind::Train)?;
            let series: Vec<&Series> = fold.train.series.iter().chain(&noisy).collect();
            let labels = fold.train.labels.iter().chain(&fold.train.labels);
            let set = SeriesSet::new(series.into_iter().zip(labels.copied()))?;
            (set, fold.val.set()?)
        }
        (Some(spec), Protocol::NoiseTrainAndTest) => {
            note(log, f, PartitionKind::Train, Stage::Noise);
            note(log, f, PartitionKind::Validation, Stage::Noise);
            let train_noisy = corrupt(&fold.train, spec, f, PartitionKind::Train)?;
            let val_noisy = corrupt(&fold.val, spec, f, PartitionKind::Validation)?;
            (
                SeriesSet::new(train_noisy.iter().zip(fold.train.labels.iter().copied()))?,
                SeriesSet::new(val_noisy.iter().zip(fold.val.labels.iter().copied()))?,
            )
        }
        _ => (fold.train.set()?, fold.val.set()?),
    };
    note(log, f, PartitionKind::Train, Stage::Train);
    note(log, f, PartitionKind::Validation, Stage::Train);
    train(&cfg.model, &train_set, &val_set, &tc).map_err(with_fold(f))
}

pub(crate) fn evaluate_fold(
    cfg: &ExperimentConfig,
    model: &TrainedModel,
    fold: &PreparedFold<'_>,
    log: Option<&AccessLog>,
) -> Result<f64> {
    let test = fold.open_test(log);
    let set = match (cfg.effective_noise(), cfg.protocol) {
        (Some(spec), Protocol::NoiseTestOnly | Protocol::NoiseTrainAndTest) => {
            let noisy = corrupt(&test, spec, fold.fold, PartitionKind::Test)?;
            SeriesSet::new(noisy.iter().zip(test.labels.iter().copied()))?
        }
        _ => test.set()?,
    };
    model.accuracy(&set).map_err(with_fold(fold.fold))
}

/// Runs every fold, reusing `clean_models[f]` for folds that train on clean data.
pub(crate) fn run_prepared(
    cfg: &ExperimentConfig,
    folds: &[PreparedFold<'_>],
    clean_models: Option<&[TrainedModel]>,
    log: Option<&AccessLog>,
) -> Result<ExperimentResult> {
    let start = Instant::now();
    let mut accuracies = Vec::with_capacity(folds.len());
    for (i, fold) in folds.iter().enumerate() {
        let trained;
        let model = match clean_models {
            Some(models) if trains_clean(cfg) => &models[i],
            _ => {
                trained = fit_fold(cfg, fold, log)?;
                &trained
            }
        };
        accuracies.push(evaluate_fold(cfg, model, fold, log)?);
    }
    Ok(ExperimentResult::new(cfg.clone(), accuracies, start.elapsed().as_secs_f64()))
}

pub(crate) fn prepare_folds<'a>(
    dataset: &'a Dataset,
    plan: &FoldPlan,
    master: u64,
    log: Option<&AccessLog>,
) -> Result<Vec<PreparedFold<'a>>> {
    partitions(dataset, plan, master)?
        .iter()
        .enumerate()
        .map(|(f, p)| PreparedFold::new(dataset, p, f, log))
        .collect()
}

/// Trains and evaluates one configuration on every fold of its plan.
pub fn run_experiment(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<ExperimentResult> {
    run_experiment_logged(cfg, dataset, None)
}

/// As [`run_experiment`], recording every partition access in `log`.
pub fn run_experiment_logged(cfg: &ExperimentConfig, dataset: &Dataset, log: Option<&AccessLog>) -> Result<ExperimentResult> {
    cfg.validate()?;
    let folds = prepare_folds(dataset, &cfg.folds, cfg.seed, log)?;
    run_prepared(cfg, &folds, None, log)
}

/// A single model trained on the first fold of `cfg.folds`.
#[derive(Debug, Clone)]
pub struct HoldoutRun {
    /// Carries the fitted scaler, so it predicts on raw series.
    pub model: TrainedModel,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Trains one model on the first fold of the plan and scores it on that fold's test partition.
pub fn train_holdout(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<HoldoutRun> {
    cfg.validate()?;
    let partition = partitions(dataset, &cfg.folds, cfg.seed)?
        .into_iter()
        .next()
        .ok_or_else(|| HarnessError::Invalid("fold plan produced no folds".into()))?;
    let fold = PreparedFold::new(dataset, &partition, 0, None)?;
    let mut model = fit_fold(cfg, &fold, None)?;
    let val_accuracy = model.accuracy(&fold.val.set()?).map_err(with_fold(0))?;
    let test_accuracy = evaluate_fold(cfg, &model, &fold, None)?;
    model.scaler = Some(fold.scaler.clone());
    Ok(HoldoutRun {
        model,
        val_accuracy,
        test_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// `None` when training diverged.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub cells: Vec<GridCell>,
    pub best: GridCell,
}

/// Optimizer × learning-rate search over the full grid.
pub fn run_grid_search(dataset: &Dataset, model: &ModelConfig, base: &TrainConfig, master: u64) -> Result<GridSearchResult> {
    run_grid_search_over(dataset, model, base, master, &OptimizerKind::ALL, &LEARNING_RATE_GRID)
}

/// Trains one model per grid cell on the 80/10/10 split and keeps the cell
/// with the highest validation accuracy. Ties prefer the lower learning rate,
/// then Adam, RMSprop, SGD in that order. The test share is never read.
pub fn run_grid_search_over(
    dataset: &Dataset,
    model: &ModelConfig,
    base: &TrainConfig,
    master: u64,
    optimizers: &[OptimizerKind],
    rates: &[f64],
) -> Result<GridSearchResult> {
    if matches!(model, ModelConfig::Rocket(_)) {
        return Err(ModelError::NotApplicable("Rocket has no optimizer to search".into()).into());
    }
    if optimizers.is_empty() || rates.is_empty() {
        return Err(HarnessError::Invalid("grid search needs at least one cell".into()));
    }
    let partition = split(dataset, GRID_SPLIT, seed::derive(master, &[seed::tag("grid_split")]))?;
    let fold = PreparedFold::new(dataset, &partition, 0, None)?;
    let (train_set, val_set) = (fold.train.set()?, fold.val.set()?);
    let train_seed = seed::derive(master, &[seed::tag("grid"), seed::tag(model.kind().key())]);
    let mut cells = Vec::new();
    for &optimizer in optimizers {
        for &learning_rate in rates {
            let tc = TrainConfig {
                optimizer,
                learning_rate,
                seed: train_seed,
                ..base.clone()
            };
            let val_accuracy = match train(model, &train_set, &val_set, &tc) {
                Ok(m) => Some(m.accuracy(&val_set)?),
                Err(ModelError::Diverged { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            cells.push(GridCell {
                optimizer,
                learning_rate,
                val_accuracy,
            });
        }
    }
    let best = cells
        .iter()
        .filter(|c| c.val_accuracy.is_some())
        .min_by(|a, b| {
            b.val_accuracy
                .partial_cmp(&a.val_accuracy)
                .expect("finite accuracies")
                .then(a.learning_rate.total_cmp(&b.learning_rate))
                .then(a.optimizer.cmp(&b.optimizer))
        })
        .cloned()
        .ok_or(HarnessError::GridDiverged)?;
    Ok(GridSearchResult { cells, best })
}
