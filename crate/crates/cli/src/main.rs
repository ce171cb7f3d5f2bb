use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use noisyarm::config::{DatasetSource, RunConfig};
use noisyarm::dataset::{export_csv, generate, ingest_csv, Dataset};
use noisyarm::harness::{run_sweep, train_holdout, ExperimentConfig, FoldPlan, Protocol, ResultStore};
use noisyarm::models::{architecture_gradchecks, ModelKind};
use noisyarm::noise::NoiseFamily;
use noisyarm::report::write_report;
use noisyarm::tensor::gradcheck::op_suite;

const DEFAULT_OUT: &str = "noisyarm-out";
const DATASET_FILE: &str = "dataset.csv";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "noisyarm", version, about = "Noise-robustness benchmark for robot-arm action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration file (`key = value` with `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; for `generate` the dataset seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory. Falls back to the config, then `NOISYARM_OUT`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_delimiter = ',')]
    models: Option<Vec<ModelKind>>,
    #[arg(long, global = true, value_delimiter = ',')]
    families: Option<Vec<NoiseFamily>>,
    #[arg(long, global = true, value_delimiter = ',')]
    levels: Option<Vec<u8>>,
    #[arg(long, global = true, value_delimiter = ',')]
    protocols: Option<Vec<Protocol>>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset to `<out>/dataset.csv`.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Validate an external CSV and re-export it to `<out>/dataset.csv`.
    Ingest {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model on a single split and save it.
    Train {
        #[arg(long, default_value = "cnn")]
        model: ModelKind,
        /// Dataset CSV; defaults to the configured source.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "level")]
        noise: Option<NoiseFamily>,
        #[arg(long)]
        level: Option<u8>,
        #[arg(long, default_value = "noise_train_and_test")]
        protocol: Protocol,
        #[command(flatten)]
        common: Common,
    },
    /// Run the (model × family × level × protocol) sweep, resuming from `<out>/results.jsonl`.
    Sweep {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Render tables and plot data from `<out>/results.jsonl`.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every autodiff op and both networks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path).with_context(|| format!("config {}", path.display()))?,
            None => RunConfig::default(),
        };
        let sweep = &mut cfg.sweep;
        if let Some(seed) = self.seed {
            sweep.seed = seed;
        }
        if let Some(w) = self.workers {
            sweep.workers = w;
        }
        if let Some(models) = &self.models {
            sweep.models = models.iter().map(|m| m.default_config()).collect();
        }
        if let Some(f) = &self.families {
            sweep.families = f.clone();
        }
        if let Some(l) = &self.levels {
            sweep.levels = l.clone();
        }
        if let Some(p) = &self.protocols {
            sweep.protocols = p.clone();
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.out.clone())
            .or_else(|| std::env::var_os("NOISYARM_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn load_dataset(cfg: &RunConfig, override_path: Option<&Path>) -> Result<Dataset> {
    let path = match (override_path, &cfg.dataset) {
        (Some(path), _) => path,
        (None, DatasetSource::Ingest(path)) => path.as_path(),
        (None, DatasetSource::Generate(params)) => return Ok(generate(params)?),
    };
    ingest_csv(path).with_context(|| format!("dataset {}", path.display()))
}

fn cmd_generate(common: &Common) -> Result<()> {
    let cfg = common.run_config()?;
    let DatasetSource::Generate(mut params) = cfg.dataset.clone() else {
        bail!("generate needs a generated dataset source, the config selects ingest");
    };
    if let Some(seed) = common.seed {
        params.seed = seed;
    }
    let ds = generate(&params)?;
    let out = common.out_dir(&cfg);
    create_dir(&out)?;
    let path = out.join(DATASET_FILE);
    export_csv(&ds, &path)?;
    println!("wrote {} samples to {}", ds.len(), path.display());
    Ok(())
}

fn cmd_ingest(input: &Path, common: &Common) -> Result<()> {
    let cfg = common.run_config()?;
    let ds = ingest_csv(input).with_context(|| format!("dataset {}", input.display()))?;
    let (c, t) = ds.shape();
    let out = common.out_dir(&cfg);
    create_dir(&out)?;
    let path = out.join(DATASET_FILE);
    export_csv(&ds, &path)?;
    println!("{} samples, {c} channels, {t} steps, class counts {:?}", ds.len(), ds.class_counts());
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_train(
    model: ModelKind,
    dataset: Option<&Path>,
    noise: Option<(NoiseFamily, u8)>,
    protocol: Protocol,
    common: &Common,
) -> Result<()> {
    let cfg = common.run_config()?;
    let ds = load_dataset(&cfg, dataset)?;
    let model_cfg = cfg
        .sweep
        .models
        .iter()
        .find(|m| m.kind() == model)
        .cloned()
        .unwrap_or_else(|| model.default_config());
    let (noise, protocol) = match noise {
        Some((family, level)) => (Some(cfg.sweep.noise_spec(family, level)?), protocol),
        None => (None, Protocol::Clean),
    };
    let exp = ExperimentConfig {
        model: model_cfg,
        noise,
        protocol,
        folds: FoldPlan::Single {
            fractions: [0.6, 0.2, 0.2],
        },
        train: cfg.sweep.train.clone(),
        seed: cfg.sweep.seed,
    };
    let run = train_holdout(&exp, &ds)?;
    let out = common.out_dir(&cfg);
    create_dir(&out)?;
    let model_path = out.join(format!("{}.model", model.key()));
    run.model.save(&model_path)?;
    let metrics = serde_json::json!({
        "cell": exp.cell().to_string(),
        "epochs": run.model.history.len(),
        "val_accuracy": run.val_accuracy,
        "test_accuracy": run.test_accuracy,
        "history": run.model.history,
    });
    let metrics_path = out.join(format!("{}.metrics.json", model.key()));
    fs::write(&metrics_path, serde_json::to_string_pretty(&metrics)?)?;
    println!(
        "{}: {} epochs, val accuracy {:.4}, test accuracy {:.4}",
        exp.cell(),
        run.model.history.len(),
        run.val_accuracy,
        run.test_accuracy
    );
    println!("wrote {} and {}", model_path.display(), metrics_path.display());
    Ok(())
}

fn cmd_sweep(dataset: Option<&Path>, common: &Common) -> Result<()> {
    let cfg = common.run_config()?;
    let ds = load_dataset(&cfg, dataset)?;
    let out = common.out_dir(&cfg);
    create_dir(&out)?;
    let store = ResultStore::in_dir(&out);
    let summary = run_sweep(&ds, &cfg.sweep, Some(&store), |r| {
        eprintln!("{}: {:.4} ± {:.4} ({:.1}s)", r.cell, r.mean, r.std, r.runtime_secs);
    })?;
    for (model, grid) in &summary.grid_searches {
        println!(
            "grid search {}: {:?} lr {}",
            model.key(),
            grid.best.optimizer,
            grid.best.learning_rate
        );
    }
    println!(
        "{} cells ({} computed, {} reused) in {}",
        summary.results.len(),
        summary.computed,
        summary.reused,
        store.path().display()
    );
    Ok(())
}

fn cmd_report(common: &Common) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir(&cfg);
    let store = ResultStore::in_dir(&out);
    let results = store.load()?;
    if results.is_empty() {
        bail!("no results in {}; run `noisyarm sweep` first", store.path().display());
    }
    let written = write_report(&results, &out).with_context(|| format!("writing report under {}", out.display()))?;
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(common: &Common) -> Result<()> {
    let seed = common.seed.unwrap_or(0);
    let mut reports = op_suite(seed)?;
    reports.extend(architecture_gradchecks(seed)?);
    let mut worst = 0.0f64;
    for r in &reports {
        println!("{:<28} {:>10.3e}  ({} entries)", r.name, r.max_rel_error, r.entries);
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error {worst:.3e}");
    if !(worst < GRADCHECK_TOLERANCE) {
        bail!("gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE:e}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common } => cmd_generate(&common),
        Command::Ingest { input, common } => cmd_ingest(&input, &common),
        Command::Train {
            model,
            dataset,
            noise,
            level,
            protocol,
            common,
        } => {
            if level.is_some() && noise.is_none() {
                bail!("--level needs --noise");
            }
            cmd_train(model, dataset.as_deref(), noise.zip(level), protocol, &common)
        }
        Command::Sweep { dataset, common } => cmd_sweep(dataset.as_deref(), &common),
        Command::Report { common } => cmd_report(&common),
        Command::Gradcheck { common } => cmd_gradcheck(&common),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
