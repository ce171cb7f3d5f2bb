use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ridge::{ridge_fit, Standardizer};
use super::rocket::RocketTransform;
use super::{
    build_network, Cnn, CnnConfig, ModelConfig, ModelError, ModelState, Network, Result, SeriesSet, TrainedModel,
    Transformer, TransformerConfig,
};
use crate::dataset::NUM_CLASSES;
use crate::seed;
use crate::tensor::gradcheck::{check_gradients, random_tensor, GradCheckReport};
use crate::tensor::{Graph, NodeId, OptimizerKind, OptimizerState, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Upper bound on optimizer steps (mini-batches) across all epochs.
    pub max_iterations: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Epochs without validation-loss improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_iterations: 100_000,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.001,
            patience: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

const EVAL_CHUNK: usize = 32;

/// Mean cross-entropy and accuracy of `params` over `set`.
pub(crate) fn evaluate_network(net: &dyn Network, params: &[Tensor], set: &SeriesSet) -> std::result::Result<(f64, f64), TensorError> {
    let all: Vec<usize> = (0..set.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, labels) = set.gather(chunk).map_err(|e| TensorError::Invalid(e.to_string()))?;
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone(), false)).collect();
        let logits = net.forward(&mut g, &ids, &x)?;
        correct += count_correct(g.value(logits), &labels);
        let ce = g.cross_entropy(logits, &labels)?;
        loss += g.value(ce).values()[0] * chunk.len() as f64;
    }
    let n = set.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Mean cross-entropy and accuracy of a trained neural model.
pub fn evaluate_loss(model: &TrainedModel, set: &SeriesSet) -> Result<(f64, f64)> {
    match &model.state {
        ModelState::Neural { params } => {
            if set.is_empty() {
                return Err(ModelError::EmptyPartition("evaluation"));
            }
            let net = build_network(&model.config, model.input_shape)?;
            Ok(evaluate_network(net.as_ref(), params, set)?)
        }
        ModelState::Rocket { .. } => Err(ModelError::NotApplicable("Rocket has no cross-entropy loss".into())),
    }
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .values()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| super::argmax(row) == l)
        .count()
}

/// Fits a model. Neural models run shuffled mini-batch epochs with early
/// stopping on validation loss and return the best-validation parameters;
/// Rocket runs its transform and a ridge head with λ picked on validation.
pub fn train(config: &ModelConfig, train_set: &SeriesSet, val_set: &SeriesSet, cfg: &TrainConfig) -> Result<TrainedModel> {
    if train_set.is_empty() {
        return Err(ModelError::EmptyPartition("training"));
    }
    if val_set.is_empty() {
        return Err(ModelError::EmptyPartition("validation"));
    }
    if val_set.shape() != train_set.shape() {
        return Err(ModelError::ShapeMismatch {
            expected: train_set.shape(),
            actual: val_set.shape(),
        });
    }
    if cfg.batch_size == 0 || cfg.max_iterations == 0 {
        return Err(ModelError::InvalidConfig("batch size and iteration budget must be positive".into()));
    }
    match config {
        ModelConfig::Rocket(rc) => train_rocket(config, rc, train_set, val_set, cfg),
        _ => train_neural(config, train_set, val_set, cfg),
    }
}

fn train_neural(config: &ModelConfig, train_set: &SeriesSet, val_set: &SeriesSet, cfg: &TrainConfig) -> Result<TrainedModel> {
    let net = build_network(config, train_set.shape())?;
    let mut params = net.init_params(seed::derive(cfg.seed, &[seed::tag("init")]));
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[seed::tag("shuffle")]));
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut wait = 0;
    let mut iterations = 0;
    let diverged = |history: &[EpochRecord]| ModelError::Diverged {
        last_good_epoch: history.last().map(|r| r.epoch),
    };

    for epoch in 0.. {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if iterations == cfg.max_iterations {
                break;
            }
            let (x, labels) = train_set.gather(batch)?;
            let mut g = Graph::new();
            let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
            let step = (|| {
                let logits = net.forward(&mut g, &ids, &x)?;
                correct += count_correct(g.value(logits), &labels);
                let loss = g.cross_entropy(logits, &labels)?;
                loss_sum += g.value(loss).values()[0] * batch.len() as f64;
                g.backward(loss)
            })();
            match step {
                Err(TensorError::NonFinite { .. }) => return Err(diverged(&history)),
                other => other?,
            }
            let grads: Vec<Tensor> = ids
                .iter()
                .zip(&params)
                .map(|(&id, p)| match g.grad(id) {
                    Some(gr) => Tensor::from_parts(p.shape().to_vec(), gr.to_vec()),
                    None => Tensor::zeros(p.shape()),
                })
                .collect();
            opt.step(&mut params, &grads)?;
            if params.iter().any(|p| p.values().iter().any(|v| !v.is_finite())) {
                return Err(diverged(&history));
            }
            seen += batch.len();
            iterations += 1;
        }
        if seen == 0 {
            break;
        }
        let (val_loss, val_accuracy) = match evaluate_network(net.as_ref(), &params, val_set) {
            Err(TensorError::NonFinite { .. }) => return Err(diverged(&history)),
            other => other?,
        };
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            val_loss,
            val_accuracy,
        });
        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            best = Some((val_loss, params.clone()));
            wait = 0;
        } else {
            wait += 1;
            if wait > cfg.patience {
                break;
            }
        }
        if iterations == cfg.max_iterations {
            break;
        }
    }
    let (_, params) = best.ok_or_else(|| diverged(&history))?;
    Ok(TrainedModel {
        config: config.clone(),
        input_shape: train_set.shape(),
        train_config: cfg.clone(),
        state: ModelState::Neural { params },
        history,
        scaler: None,
    })
}

fn train_rocket(
    config: &ModelConfig,
    rc: &super::RocketConfig,
    train_set: &SeriesSet,
    val_set: &SeriesSet,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    rc.validate()?;
    let (c, t) = train_set.shape();
    let transform = RocketTransform::generate(c, t, rc.num_kernels, seed::derive(rc.seed, &[cfg.seed]))?;
    let mut train_x = transform.transform(train_set);
    let standardizer = Standardizer::fit(&train_x);
    standardizer.apply(&mut train_x);
    let mut val_x = transform.transform(val_set);
    standardizer.apply(&mut val_x);
    let ridge = ridge_fit(&train_x, train_set.labels(), Some((&val_x, val_set.labels())), &rc.lambda_grid, NUM_CLASSES)?;

    let summarize = |x: &super::FeatureMatrix, labels: &[usize]| {
        let scores = ridge.scores(x);
        let n = labels.len() as f64;
        let mse = ridge.objective(x, labels) - ridge.lambda * ridge.weights.iter().map(|w| w * w).sum::<f64>();
        let correct = scores.iter().zip(labels).filter(|(s, &l)| super::argmax(s) == l).count();
        (mse / n, correct as f64 / n)
    };
    let (train_loss, train_accuracy) = summarize(&train_x, train_set.labels());
    let (val_loss, val_accuracy) = summarize(&val_x, val_set.labels());
    Ok(TrainedModel {
        config: config.clone(),
        input_shape: (c, t),
        train_config: cfg.clone(),
        state: ModelState::Rocket {
            kernels: transform.into_kernels(),
            standardizer,
            ridge,
        },
        history: vec![EpochRecord {
            epoch: 0,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
        }],
        scaler: None,
    })
}

/// End-to-end finite-difference checks of both trainable architectures on a
/// two-sample batch of 2-channel, 12-step series, through the cross-entropy loss.
pub fn architecture_gradchecks(seed: u64) -> std::result::Result<Vec<GradCheckReport>, TensorError> {
    let (c, t) = (2, 12);
    let labels = [3, 7];
    let mut input_rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut input_rng, &[2, c, t], 1.0);

    let cnn_cfg = CnnConfig {
        conv1_filters: 4,
        conv2_filters: 5,
        dense_hidden: 6,
        ..Default::default()
    };
    let tf_cfg = TransformerConfig {
        heads: 2,
        ffn_dim: 8,
        blocks: 2,
        model_dim: 4,
        time_pool: 2,
        ..Default::default()
    };
    let nets: Vec<(&str, Box<dyn Network>)> = vec![
        ("cnn", Box::new(Cnn::new(c, t, cnn_cfg).map_err(invalid)?)),
        ("transformer", Box::new(Transformer::new(c, t, tf_cfg).map_err(invalid)?)),
    ];
    nets.iter()
        .enumerate()
        .map(|(i, (name, net))| {
            let s = seed::derive(seed, &[i as u64]);
            let make = |rng: &mut ChaCha8Rng| net.init_params(rand::Rng::gen(rng));
            check_gradients(name, s, make, |g, ids| {
                let logits = net.forward(g, ids, &x)?;
                g.cross_entropy(logits, &labels)
            })
        })
        .collect()
}

fn invalid(e: ModelError) -> TensorError {
    TensorError::Invalid(e.to_string())
}
