//! Run configuration read from a line-based `key = value` file with
//! `[section]` headers. `#` and `;` start comments.
//!
//! ```text
//! [dataset]
//! source = generate        # or: ingest
//! samples_per_class = 50
//!
//! [sweep]
//! models = cnn, rocket
//! levels = 10, 50
//!
//! [run]
//! seed = 7
//! workers = 4
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::dataset::GeneratorParams;
use crate::harness::{FoldPlan, Protocol, SweepConfig};
use crate::models::{ModelConfig, ModelKind};
use crate::noise::NoiseFamily;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: [{section}] {key}: {message}")]
    Value {
        line: usize,
        section: String,
        key: String,
        message: String,
    },
    #[error("line {line}: unknown key '{key}' in [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Generate(GeneratorParams),
    Ingest(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    /// Axes, training settings, master seed and worker count.
    pub sweep: SweepConfig,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Generate(GeneratorParams::default()),
            sweep: SweepConfig::default(),
            out: None,
        }
    }
}

#[derive(Debug)]
struct Entry {
    value: String,
    line: usize,
}

/// Raw `(section, key) → value` pairs; consumed as they are interpreted.
struct Ini {
    entries: BTreeMap<(String, String), Entry>,
}

impl Ini {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split(['#', ';']).next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line,
                    message: format!("unterminated section header '{content}'"),
                })?;
                section = name.trim().to_ascii_lowercase();
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("expected key = value, got '{content}'"),
            })?;
            if section.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    message: "key outside of any [section]".into(),
                });
            }
            let key = key.trim().to_ascii_lowercase();
            let previous = entries.insert(
                (section.clone(), key.clone()),
                Entry {
                    value: value.trim().to_string(),
                    line,
                },
            );
            if previous.is_some() {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("duplicate key '{key}' in [{section}]"),
                });
            }
        }
        Ok(Self { entries })
    }

    fn take<T>(&mut self, section: &str, key: &str, parse: impl FnOnce(&str) -> std::result::Result<T, String>) -> Result<Option<T>> {
        match self.entries.remove(&(section.to_string(), key.to_string())) {
            None => Ok(None),
            Some(e) => parse(&e.value).map(Some).map_err(|message| ConfigError::Value {
                line: e.line,
                section: section.into(),
                key: key.into(),
                message,
            }),
        }
    }

    fn set<T: FromStr>(&mut self, section: &str, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(section, key, |s| s.parse::<T>().map_err(|e| e.to_string()))? {
            *slot = v;
        }
        Ok(())
    }

    fn list<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        self.take(section, key, |s| parse_list(s))
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some(((section, key), e)) => Err(ConfigError::UnknownKey { line: e.line, section, key }),
        }
    }
}

/// Comma-separated list; surrounding whitespace and empty items are ignored.
pub fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|e| format!("'{t}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if items.is_empty() {
        return Err("list is empty".into());
    }
    Ok(items)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> std::result::Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses config text. Relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut ini = Ini::parse(text)?;
        let mut cfg = RunConfig::default();

        let source = ini.take("dataset", "source", |s| Ok(s.to_ascii_lowercase()))?;
        let path = ini.take("dataset", "path", |s| Ok(PathBuf::from(s)))?;
        let mut params = GeneratorParams::default();
        ini.set("dataset", "samples_per_class", &mut params.samples_per_class)?;
        ini.set("dataset", "timesteps", &mut params.timesteps)?;
        ini.set("dataset", "cameras", &mut params.cameras)?;
        ini.set("dataset", "keypoints", &mut params.keypoints)?;
        ini.set("dataset", "jitter_std", &mut params.jitter_std)?;
        ini.set("dataset", "timing_jitter", &mut params.timing_jitter)?;
        ini.set("dataset", "seed", &mut params.seed)?;
        cfg.dataset = match (source.as_deref(), path) {
            (None | Some("generate"), None) => DatasetSource::Generate(params),
            (Some("ingest"), Some(p)) => DatasetSource::Ingest(base_dir.join(p)),
            (Some("ingest"), None) => return Err(ConfigError::Invalid("[dataset] source = ingest needs a path".into())),
            (None | Some("generate"), Some(_)) => {
                return Err(ConfigError::Invalid("[dataset] path is only valid with source = ingest".into()))
            }
            (Some(other), _) => return Err(ConfigError::Invalid(format!("[dataset] unknown source '{other}'"))),
        };

        let sweep = &mut cfg.sweep;
        if let Some(models) = ini.list::<ModelKind>("sweep", "models")? {
            sweep.models = models.into_iter().map(ModelKind::default_config).collect();
        }
        if let Some(families) = ini.list::<NoiseFamily>("sweep", "families")? {
            sweep.families = families;
        }
        if let Some(levels) = ini.list::<u8>("sweep", "levels")? {
            sweep.levels = levels;
        }
        if let Some(protocols) = ini.list::<Protocol>("sweep", "protocols")? {
            sweep.protocols = protocols;
        }
        if let Some(k) = ini.take("sweep", "folds", |s| s.parse::<usize>().map_err(|e| e.to_string()))? {
            sweep.folds = FoldPlan::KFold { k };
        }
        ini.set("sweep", "region_size", &mut sweep.region_size)?;
        ini.set("sweep", "grid_search", &mut sweep.grid_search)?;

        let train = &mut sweep.train;
        ini.set("train", "batch_size", &mut train.batch_size)?;
        ini.set("train", "max_iterations", &mut train.max_iterations)?;
        ini.set("train", "optimizer", &mut train.optimizer)?;
        ini.set("train", "learning_rate", &mut train.learning_rate)?;
        ini.set("train", "patience", &mut train.patience)?;

        for model in sweep.models.iter_mut() {
            match model {
                ModelConfig::Cnn(c) => {
                    ini.set("cnn", "conv1_filters", &mut c.conv1_filters)?;
                    ini.set("cnn", "conv2_filters", &mut c.conv2_filters)?;
                    ini.set("cnn", "dense_hidden", &mut c.dense_hidden)?;
                }
                ModelConfig::Transformer(t) => {
                    ini.set("transformer", "model_dim", &mut t.model_dim)?;
                    ini.set("transformer", "heads", &mut t.heads)?;
                    ini.set("transformer", "ffn_dim", &mut t.ffn_dim)?;
                    ini.set("transformer", "blocks", &mut t.blocks)?;
                    ini.set("transformer", "time_pool", &mut t.time_pool)?;
                    ini.set("transformer", "positional_encoding", &mut t.positional_encoding)?;
                }
                ModelConfig::Rocket(r) => {
                    ini.set("rocket", "num_kernels", &mut r.num_kernels)?;
                    if let Some(grid) = ini.list::<f64>("rocket", "lambda_grid")? {
                        r.lambda_grid = grid;
                    }
                }
            }
        }

        ini.set("run", "seed", &mut sweep.seed)?;
        ini.set("run", "workers", &mut sweep.workers)?;
        cfg.out = ini.take("run", "out", |s| Ok(base_dir.join(s)))?;
        ini.finish()?;
        Ok(cfg)
    }
}
