//! Labeled keypoint time series: synthetic generation, CSV exchange, and
//! deterministic stratified partitioning.

mod csv_io;
mod generator;
mod normalize;
mod split;

pub use csv_io::{export_csv, ingest_csv, read_csv, write_csv};
pub use generator::{
    cell_center, generate, minimum_jerk, ArmGeometry, GeneratorParams, SamplePlan, FRAME_HEIGHT, FRAME_WIDTH,
    HOME_POSITION,
};
pub use normalize::MinMaxScaler;
pub use split::{kfold, split, Partition};

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of action classes: one per cell of the 3×3 board.
pub const NUM_CLASSES: usize = 9;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("series of {channels}x{timesteps} needs {expected} values, got {actual}")]
    SeriesShape {
        channels: usize,
        timesteps: usize,
        expected: usize,
        actual: usize,
    },
    #[error("series contains a non-finite value at channel {channel}, step {step}")]
    NonFinite { channel: usize, step: usize },
    #[error("duplicate channel name '{0}'")]
    DuplicateChannel(String),
    #[error("sample '{sample_id}' has label {label}, expected 0..=8")]
    LabelOutOfRange { sample_id: String, label: i64 },
    #[error("sample '{sample_id}' has shape {actual:?}, dataset uses {expected:?}")]
    InconsistentShape {
        sample_id: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("sample '{sample_id}' lists channels in a different order than the first sample")]
    ChannelOrder { sample_id: String },
    #[error("duplicate sample id '{0}'")]
    DuplicateSample(String),
    #[error("class {0} has no samples")]
    MissingClass(usize),
    #[error("expected {NUM_CLASSES} class names, got {0}")]
    ClassNames(usize),
    #[error("dataset is empty")]
    Empty,
    #[error("CSV: missing or malformed header ({0})")]
    MissingHeader(String),
    #[error("CSV row {row}, column {column}: cannot parse '{value}'")]
    Parse { row: usize, column: usize, value: String },
    #[error("CSV row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    Fractions([f64; 3]),
    #[error("class {class} has {available} samples but the partition plan needs {needed}")]
    UndersizedClass {
        class: usize,
        available: usize,
        needed: usize,
    },
    #[error("k-fold needs k >= 2, got {0}")]
    FoldCount(usize),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One multichannel keypoint trajectory, stored channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    channels: usize,
    timesteps: usize,
    values: Vec<f64>,
    channel_names: Vec<String>,
}

impl Series {
    pub fn new(channels: usize, timesteps: usize, values: Vec<f64>, channel_names: Vec<String>) -> Result<Self> {
        let expected = channels * timesteps;
        if channels == 0 || timesteps == 0 || values.len() != expected || channel_names.len() != channels {
            return Err(DatasetError::SeriesShape {
                channels,
                timesteps,
                expected,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite {
                channel: i / timesteps,
                step: i % timesteps,
            });
        }
        let mut seen = HashSet::with_capacity(channels);
        for name in &channel_names {
            if !seen.insert(name.as_str()) {
                return Err(DatasetError::DuplicateChannel(name.clone()));
            }
        }
        Ok(Self {
            channels,
            timesteps,
            values,
            channel_names,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels, self.timesteps)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.timesteps..(c + 1) * self.timesteps]
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    /// Same layout, new values. Used by transforms that preserve finiteness.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            ..self.clone()
        }
    }

    /// Per-channel `(min, max)`.
    pub fn channel_ranges(&self) -> Vec<(f64, f64)> {
        (0..self.channels)
            .map(|c| {
                self.channel(c)
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub series: Series,
    pub label: usize,
    pub sample_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { seed: u64, params: GeneratorParams },
    Ingested { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    class_names: Vec<String>,
    provenance: Provenance,
}

pub fn default_class_names() -> Vec<String> {
    (0..NUM_CLASSES).map(|i| format!("r{}c{}", i / 3, i % 3)).collect()
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, class_names: Vec<String>, provenance: Provenance) -> Result<Self> {
        if class_names.len() != NUM_CLASSES {
            return Err(DatasetError::ClassNames(class_names.len()));
        }
        let first = samples.first().ok_or(DatasetError::Empty)?;
        let shape = first.series.shape();
        let names = first.series.channel_names().to_vec();
        let mut present = [false; NUM_CLASSES];
        let mut ids = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.label >= NUM_CLASSES {
                return Err(DatasetError::LabelOutOfRange {
                    sample_id: s.sample_id.clone(),
                    label: s.label as i64,
                });
            }
            if s.series.shape() != shape {
                return Err(DatasetError::InconsistentShape {
                    sample_id: s.sample_id.clone(),
                    expected: shape,
                    actual: s.series.shape(),
                });
            }
            if s.series.channel_names() != names.as_slice() {
                return Err(DatasetError::ChannelOrder {
                    sample_id: s.sample_id.clone(),
                });
            }
            if !ids.insert(s.sample_id.as_str()) {
                return Err(DatasetError::DuplicateSample(s.sample_id.clone()));
            }
            present[s.label] = true;
        }
        if let Some(missing) = present.iter().position(|p| !p) {
            return Err(DatasetError::MissingClass(missing));
        }
        Ok(Self {
            samples,
            class_names,
            provenance,
        })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// `(channels, timesteps)` shared by every sample.
    pub fn shape(&self) -> (usize, usize) {
        self.samples[0].series.shape()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(v: f64) -> Series {
        Series::new(1, 2, vec![v, v], vec!["a".into()]).unwrap()
    }

    fn sample(id: &str, label: usize) -> LabeledSample {
        LabeledSample {
            series: series(label as f64),
            label,
            sample_id: id.into(),
        }
    }

    #[test]
    fn series_invariants() {
        assert!(Series::new(2, 2, vec![0.0; 3], vec!["a".into(), "b".into()]).is_err());
        assert!(matches!(
            Series::new(2, 1, vec![0.0; 2], vec!["a".into(), "a".into()]),
            Err(DatasetError::DuplicateChannel(_))
        ));
        assert!(matches!(
            Series::new(1, 2, vec![0.0, f64::NAN], vec!["a".into()]),
            Err(DatasetError::NonFinite { channel: 0, step: 1 })
        ));
    }

    #[test]
    fn dataset_requires_every_class() {
        let samples: Vec<_> = (0..8).map(|l| sample(&format!("s{l}"), l)).collect();
        let err = Dataset::new(samples, default_class_names(), Provenance::Ingested { path: "x".into() });
        assert!(matches!(err, Err(DatasetError::MissingClass(8))));
    }

    #[test]
    fn dataset_rejects_duplicate_ids() {
        let mut samples: Vec<_> = (0..9).map(|l| sample(&format!("s{l}"), l)).collect();
        samples.push(sample("s0", 0));
        let err = Dataset::new(samples, default_class_names(), Provenance::Ingested { path: "x".into() });
        assert!(matches!(err, Err(DatasetError::DuplicateSample(_))));
    }
}
