use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pipeline::{fit_fold, prepare_folds, run_grid_search, run_prepared, trains_clean};
use super::{CellKey, ExperimentConfig, ExperimentResult, FoldPlan, GridSearchResult, HarnessError, Protocol, Result, ResultStore};
use crate::dataset::Dataset;
use crate::models::{ModelConfig, ModelKind, TrainConfig, TrainedModel};
use crate::noise::{NoiseFamily, NoiseSpec, DEFAULT_REGION_SIZE, NOISE_LEVELS};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub models: Vec<ModelConfig>,
    pub families: Vec<NoiseFamily>,
    pub levels: Vec<u8>,
    /// Noisy protocols to run. A clean baseline per model is always added.
    pub protocols: Vec<Protocol>,
    pub folds: FoldPlan,
    pub train: TrainConfig,
    pub seed: u64,
    pub region_size: usize,
    /// Picks optimizer and learning rate per trainable model before the sweep.
    pub grid_search: bool,
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            models: ModelKind::ALL.iter().map(|k| k.default_config()).collect(),
            families: NoiseFamily::ALL.to_vec(),
            levels: NOISE_LEVELS.to_vec(),
            protocols: Protocol::NOISY.to_vec(),
            folds: FoldPlan::default(),
            train: TrainConfig::default(),
            seed: 0,
            region_size: DEFAULT_REGION_SIZE,
            grid_search: false,
            workers: 1,
        }
    }
}

impl SweepConfig {
    fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(HarnessError::Invalid("sweep needs at least one model".into()));
        }
        if !self.protocols.is_empty() && (self.families.is_empty() || self.levels.is_empty()) {
            return Err(HarnessError::Invalid("noisy protocols need at least one family and level".into()));
        }
        if self.protocols.contains(&Protocol::Clean) {
            return Err(HarnessError::Invalid("list only noisy protocols; the clean baseline is implicit".into()));
        }
        if self.workers == 0 {
            return Err(HarnessError::Invalid("worker count must be positive".into()));
        }
        let mut kinds: Vec<ModelKind> = self.models.iter().map(ModelConfig::kind).collect();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != self.models.len() {
            return Err(HarnessError::Invalid("each model kind may appear once".into()));
        }
        Ok(())
    }

    /// Noise spec of a cell; its seed depends only on the family and level, so
    /// every model and protocol sees the same corruption.
    pub fn noise_spec(&self, family: NoiseFamily, level: u8) -> Result<NoiseSpec> {
        let s = seed::derive(self.seed, &[seed::tag("noise"), seed::tag(family.key()), level as u64]);
        Ok(NoiseSpec::new(family, level, s)?.with_region_size(self.region_size)?)
    }

    /// Every experiment of the sweep: per model, its clean baseline followed by
    /// family × level × protocol.
    pub fn experiments(&self, train_overrides: &HashMap<ModelKind, TrainConfig>) -> Result<Vec<ExperimentConfig>> {
        self.validate()?;
        let mut out = Vec::new();
        for model in &self.models {
            let train = train_overrides.get(&model.kind()).cloned().unwrap_or_else(|| self.train.clone());
            let base = ExperimentConfig {
                model: model.clone(),
                noise: None,
                protocol: Protocol::Clean,
                folds: self.folds.clone(),
                train,
                seed: self.seed,
            };
            out.push(base.clone());
            for &family in &self.families {
                for &level in &self.levels {
                    let spec = self.noise_spec(family, level)?;
                    for &protocol in &self.protocols {
                        out.push(ExperimentConfig {
                            noise: Some(spec),
                            protocol,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    /// One result per experiment, in [`SweepConfig::experiments`] order.
    pub results: Vec<ExperimentResult>,
    pub computed: usize,
    pub reused: usize,
    pub grid_searches: Vec<(ModelKind, GridSearchResult)>,
}

/// Runs a sweep, skipping cells already persisted with the same config hash.
///
/// Clean models are trained once per (model, fold) and shared by the clean
/// baseline and every test-only cell. Results stream to `store` as cells
/// finish; on completion the file is rewritten in cell order. The outcome
/// does not depend on `workers`.
pub fn run_sweep(
    dataset: &Dataset,
    cfg: &SweepConfig,
    store: Option<&ResultStore>,
    mut on_result: impl FnMut(&ExperimentResult) + Send,
) -> Result<SweepSummary> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| HarnessError::Invalid(e.to_string()))?;

    let mut overrides = HashMap::new();
    let mut grid_searches = Vec::new();
    if cfg.grid_search {
        for model in cfg.models.iter().filter(|m| m.kind() != ModelKind::Rocket) {
            let grid = pool.install(|| run_grid_search(dataset, model, &cfg.train, cfg.seed))?;
            overrides.insert(
                model.kind(),
                TrainConfig {
                    optimizer: grid.best.optimizer,
                    learning_rate: grid.best.learning_rate,
                    ..cfg.train.clone()
                },
            );
            grid_searches.push((model.kind(), grid));
        }
    }
    let experiments = cfg.experiments(&overrides)?;

    let existing: Vec<ExperimentResult> = match store {
        Some(s) => s.load()?,
        None => Vec::new(),
    };
    let mut persisted: BTreeMap<CellKey, ExperimentResult> = existing.into_iter().map(|r| (r.cell, r)).collect();
    let pending: Vec<&ExperimentConfig> = experiments
        .iter()
        .filter(|e| persisted.get(&e.cell()).map_or(true, |r| r.config_hash != e.hash()))
        .collect();

    let folds = prepare_folds(dataset, &cfg.folds, cfg.seed, None)?;
    let needs_clean: Vec<&ExperimentConfig> = experiments
        .iter()
        .filter(|e| e.protocol == Protocol::Clean)
        .filter(|base| pending.iter().any(|p| p.model == base.model && trains_clean(p)))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..needs_clean.len()).flat_map(|m| (0..folds.len()).map(move |f| (m, f))).collect();
    let trained: Vec<TrainedModel> = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, f)| fit_fold(needs_clean[m], &folds[f], None))
            .collect::<Result<_>>()
    })?;
    let cache: HashMap<ModelKind, &[TrainedModel]> = needs_clean
        .iter()
        .enumerate()
        .map(|(m, e)| (e.model.kind(), &trained[m * folds.len()..(m + 1) * folds.len()]))
        .collect();

    let (tx, rx) = mpsc::channel::<ExperimentResult>();
    let computed: Vec<ExperimentResult> = std::thread::scope(|scope| -> Result<Vec<ExperimentResult>> {
        let writer = scope.spawn(move || -> Result<Vec<ExperimentResult>> {
            let mut done = Vec::new();
            for r in rx {
                if let Some(s) = store {
                    s.append(&r)?;
                }
                on_result(&r);
                done.push(r);
            }
            Ok(done)
        });
        let run = pool.install(|| {
            pending.par_iter().try_for_each_with(tx, |tx, e| {
                let clean = cache.get(&e.model.kind()).copied();
                let result = run_prepared(e, &folds, clean, None)?;
                tx.send(result).map_err(|_| HarnessError::Invalid("result writer stopped".into()))
            })
        });
        let written = writer.join().expect("writer thread panicked");
        run?;
        written
    })?;

    let computed_count = computed.len();
    for r in computed {
        persisted.insert(r.cell, r);
    }
    if let Some(s) = store {
        s.rewrite(&persisted.values().cloned().collect::<Vec<_>>())?;
    }
    let results = experiments
        .iter()
        .map(|e| persisted.get(&e.cell()).cloned().expect("every experiment has a result"))
        .collect();
    Ok(SweepSummary {
        results,
        computed: computed_count,
        reused: experiments.len() - computed_count,
        grid_searches,
    })
}
