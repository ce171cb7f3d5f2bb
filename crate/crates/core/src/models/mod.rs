//! The three classifiers: a 1-D CNN, a transformer encoder, and Rocket with a
//! ridge head. CNN and transformer train on the tape; Rocket fits in closed form.

mod cnn;
mod io;
mod ridge;
mod rocket;
mod train;
mod transformer;

pub use cnn::{Cnn, CnnConfig};
pub use io::{MODEL_FORMAT_MAGIC, MODEL_FORMAT_VERSION};
pub use ridge::{ridge_fit, ridge_fit_lambda, FeatureMatrix, RidgeClassifier, Standardizer, DEFAULT_LAMBDA_GRID};
pub use rocket::{RocketConfig, RocketKernel, RocketTransform, ROCKET_KERNEL_LENGTHS};
pub use train::{architecture_gradchecks, evaluate_loss, train, EpochRecord, TrainConfig};
pub use transformer::{sinusoidal_encoding, Transformer, TransformerConfig};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{LabeledSample, MinMaxScaler, Series};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("series of {got} steps is too short for this architecture; minimum is {min}")]
    TooShort { min: usize, got: usize },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged (non-finite loss); last good epoch {last_good_epoch:?}")]
    Diverged { last_good_epoch: Option<usize> },
    #[error("{0} set is empty")]
    EmptyPartition(&'static str),
    #[error("input shape {actual:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("ridge system is singular at lambda {0}")]
    Singular(f64),
    #[error("{0}")]
    NotApplicable(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cnn,
    Transformer,
    Rocket,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Cnn, ModelKind::Transformer, ModelKind::Rocket];

    pub fn key(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::Transformer => "transformer",
            ModelKind::Rocket => "rocket",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            ModelKind::Cnn => "CNN",
            ModelKind::Transformer => "Transformer",
            ModelKind::Rocket => "Rocket",
        }
    }

    pub fn default_config(self) -> ModelConfig {
        match self {
            ModelKind::Cnn => ModelConfig::Cnn(CnnConfig::default()),
            ModelKind::Transformer => ModelConfig::Transformer(TransformerConfig::default()),
            ModelKind::Rocket => ModelConfig::Rocket(RocketConfig::default()),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cnn" => Ok(Self::Cnn),
            "transformer" => Ok(Self::Transformer),
            "rocket" => Ok(Self::Rocket),
            other => Err(ModelError::InvalidConfig(format!("unknown model '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Cnn(CnnConfig),
    Transformer(TransformerConfig),
    Rocket(RocketConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Cnn(_) => ModelKind::Cnn,
            ModelConfig::Transformer(_) => ModelKind::Transformer,
            ModelConfig::Rocket(_) => ModelKind::Rocket,
        }
    }
}

/// A stack of equally shaped series with labels, stored `[n, channels, timesteps]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSet {
    channels: usize,
    timesteps: usize,
    values: Vec<f64>,
    labels: Vec<usize>,
}

impl SeriesSet {
    pub fn new<'a>(items: impl IntoIterator<Item = (&'a Series, usize)>) -> Result<Self> {
        let mut it = items.into_iter().peekable();
        let (channels, timesteps) = match it.peek() {
            Some((s, _)) => s.shape(),
            None => (0, 0),
        };
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (s, label) in it {
            if s.shape() != (channels, timesteps) {
                return Err(ModelError::ShapeMismatch {
                    expected: (channels, timesteps),
                    actual: s.shape(),
                });
            }
            values.extend_from_slice(s.values());
            labels.push(label);
        }
        Ok(Self {
            channels,
            timesteps,
            values,
            labels,
        })
    }

    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a LabeledSample>) -> Result<Self> {
        Self::new(samples.into_iter().map(|s| (&s.series, s.label)))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels, self.timesteps)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.channels * self.timesteps;
        &self.values[i * n..(i + 1) * n]
    }

    /// Copies the listed samples into a `[batch, channels, timesteps]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut values = Vec::with_capacity(indices.len() * self.channels * self.timesteps);
        for &i in indices {
            values.extend_from_slice(self.sample(i));
        }
        let t = Tensor::new(vec![indices.len(), self.channels, self.timesteps], values)?;
        Ok((t, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub(crate) fn map_values(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let n = self.channels * self.timesteps;
        Self {
            values: self.values.chunks(n).flat_map(f).collect(),
            ..self.clone()
        }
    }
}

/// A differentiable classifier: parameter initialisation plus a forward pass
/// from `[batch, channels, timesteps]` to `[batch, classes]` logits.
pub(crate) trait Network {
    fn init_params(&self, seed: u64) -> Vec<Tensor>;
    fn forward(&self, g: &mut Graph, params: &[NodeId], input: &Tensor) -> std::result::Result<NodeId, TensorError>;
}

/// Uniform fan-in initialisation, `U(-sqrt(1/fan_in), sqrt(1/fan_in))`.
pub(crate) fn fan_in_uniform(rng: &mut impl rand::Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound)).expect("finite init")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelState {
    Neural {
        params: Vec<Tensor>,
    },
    Rocket {
        kernels: Vec<RocketKernel>,
        standardizer: Standardizer,
        ridge: RidgeClassifier,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: ModelConfig,
    /// `(channels, timesteps)` of the training inputs.
    pub input_shape: (usize, usize),
    pub train_config: TrainConfig,
    pub state: ModelState,
    pub history: Vec<EpochRecord>,
    /// Preprocessing applied to raw series before prediction, when present.
    pub scaler: Option<MinMaxScaler>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// Per-sample class scores (logits or ridge scores).
    pub scores: Vec<Vec<f64>>,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn build_network(config: &ModelConfig, shape: (usize, usize)) -> Result<Box<dyn Network + Send + Sync>> {
    match config {
        ModelConfig::Cnn(c) => Ok(Box::new(Cnn::new(shape.0, shape.1, c.clone())?)),
        ModelConfig::Transformer(c) => Ok(Box::new(Transformer::new(shape.0, shape.1, c.clone())?)),
        ModelConfig::Rocket(_) => Err(ModelError::NotApplicable("Rocket has no differentiable network".into())),
    }
}

const PREDICT_CHUNK: usize = 32;

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        self.config.kind()
    }

    /// Class scores for every sample. Raw inputs are scaled first when the
    /// model carries a scaler.
    pub fn predict(&self, set: &SeriesSet) -> Result<Prediction> {
        if set.shape() != self.input_shape && !set.is_empty() {
            return Err(ModelError::ShapeMismatch {
                expected: self.input_shape,
                actual: set.shape(),
            });
        }
        let scaled;
        let set = match &self.scaler {
            Some(scaler) => {
                let names: Vec<String> = (0..set.channels).map(|c| c.to_string()).collect();
                scaled = set.map_values(|v| {
                    let s = Series::new(set.channels, set.timesteps, v.to_vec(), names.clone()).expect("shape checked");
                    scaler.transform(&s).values().to_vec()
                });
                &scaled
            }
            None => set,
        };
        let scores = match &self.state {
            ModelState::Neural { params } => {
                let net = build_network(&self.config, self.input_shape)?;
                let mut scores = Vec::with_capacity(set.len());
                let all: Vec<usize> = (0..set.len()).collect();
                for chunk in all.chunks(PREDICT_CHUNK) {
                    let (x, _) = set.gather(chunk)?;
                    let mut g = Graph::new();
                    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone(), false)).collect();
                    let logits = net.forward(&mut g, &ids, &x)?;
                    let classes = g.value(logits).shape()[1];
                    scores.extend(g.value(logits).values().chunks(classes).map(<[f64]>::to_vec));
                }
                scores
            }
            ModelState::Rocket {
                kernels,
                standardizer,
                ridge,
            } => {
                let transform = RocketTransform::from_kernels(self.input_shape.0, self.input_shape.1, kernels.clone());
                let mut features = transform.transform(set);
                standardizer.apply(&mut features);
                ridge.scores(&features)
            }
        };
        Ok(Prediction {
            labels: scores.iter().map(|s| argmax(s)).collect(),
            scores,
        })
    }

    pub fn accuracy(&self, set: &SeriesSet) -> Result<f64> {
        if set.is_empty() {
            return Err(ModelError::EmptyPartition("evaluation"));
        }
        let pred = self.predict(set)?;
        let correct = pred.labels.iter().zip(set.labels()).filter(|(a, b)| a == b).count();
        Ok(correct as f64 / set.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 9]), 0);
    }

    #[test]
    fn kind_parsing() {
        for k in ModelKind::ALL {
            assert_eq!(k.key().parse::<ModelKind>().unwrap(), k);
            assert_eq!(k.default_config().kind(), k);
        }
        assert!("svm".parse::<ModelKind>().is_err());
    }
}
