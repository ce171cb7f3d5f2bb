use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fan_in_uniform, ModelError, Network, Result};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

/// Two conv/pool stages followed by two dense layers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CnnConfig {
    pub conv1_filters: usize,
    pub conv1_kernel: usize,
    pub pool1: usize,
    pub conv2_filters: usize,
    pub conv2_kernel: usize,
    pub pool2: usize,
    pub dense_hidden: usize,
    pub classes: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            conv1_filters: 32,
            conv1_kernel: 3,
            pool1: 2,
            conv2_filters: 64,
            conv2_kernel: 3,
            pool2: 2,
            dense_hidden: 100,
            classes: 9,
        }
    }
}

impl CnnConfig {
    /// Length after the second pooling stage, if every stage keeps at least one step.
    pub fn output_length(&self, timesteps: usize) -> Option<usize> {
        let c1 = timesteps.checked_sub(self.conv1_kernel - 1)?;
        let p1 = c1 / self.pool1;
        let c2 = p1.checked_sub(self.conv2_kernel - 1)?;
        let p2 = c2 / self.pool2;
        (c1 >= 1 && p1 >= 1 && c2 >= 1 && p2 >= 1).then_some(p2)
    }

    pub fn min_timesteps(&self) -> usize {
        (1..).find(|&t| self.output_length(t).is_some()).expect("some length always fits")
    }

    fn validate(&self) -> Result<()> {
        let fields = [
            self.conv1_filters,
            self.conv1_kernel,
            self.pool1,
            self.conv2_filters,
            self.conv2_kernel,
            self.pool2,
            self.dense_hidden,
            self.classes,
        ];
        if fields.contains(&0) {
            return Err(ModelError::InvalidConfig("CNN sizes must be positive".into()));
        }
        Ok(())
    }
}

/// conv(32,3) → relu → pool(2) → conv(64,3) → relu → pool(2) → flatten →
/// dense(100) → relu → dense(classes).
#[derive(Debug, Clone)]
pub struct Cnn {
    cfg: CnnConfig,
    channels: usize,
    flat: usize,
}

impl Cnn {
    pub fn new(channels: usize, timesteps: usize, cfg: CnnConfig) -> Result<Self> {
        cfg.validate()?;
        let len = cfg.output_length(timesteps).ok_or(ModelError::TooShort {
            min: cfg.min_timesteps(),
            got: timesteps,
        })?;
        Ok(Self {
            flat: cfg.conv2_filters * len,
            cfg,
            channels,
        })
    }

    /// Width of the flattened features feeding the first dense layer.
    pub fn flatten_len(&self) -> usize {
        self.flat
    }
}

impl Network for Cnn {
    fn init_params(&self, seed: u64) -> Vec<Tensor> {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![
            fan_in_uniform(&mut rng, &[c.conv1_filters, self.channels, c.conv1_kernel], self.channels * c.conv1_kernel),
            Tensor::zeros(&[c.conv1_filters]),
            fan_in_uniform(&mut rng, &[c.conv2_filters, c.conv1_filters, c.conv2_kernel], c.conv1_filters * c.conv2_kernel),
            Tensor::zeros(&[c.conv2_filters]),
            fan_in_uniform(&mut rng, &[self.flat, c.dense_hidden], self.flat),
            Tensor::zeros(&[c.dense_hidden]),
            fan_in_uniform(&mut rng, &[c.dense_hidden, c.classes], c.dense_hidden),
            Tensor::zeros(&[c.classes]),
        ]
    }

    fn forward(&self, g: &mut Graph, p: &[NodeId], input: &Tensor) -> std::result::Result<NodeId, TensorError> {
        let x = g.leaf(input.clone(), false);
        let h = g.conv1d(x, p[0], p[1])?;
        let h = g.relu(h)?;
        let h = g.maxpool1d(h, self.cfg.pool1)?;
        let h = g.conv1d(h, p[2], p[3])?;
        let h = g.relu(h)?;
        let h = g.maxpool1d(h, self.cfg.pool2)?;
        let h = g.flatten(h)?;
        let h = g.dense(h, p[4], p[5])?;
        let h = g.relu(h)?;
        g.dense(h, p[6], p[7])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_arithmetic() {
        let cfg = CnnConfig::default();
        assert_eq!(cfg.output_length(481), Some(118));
        let net = Cnn::new(44, 481, cfg.clone()).unwrap();
        assert_eq!(net.flatten_len(), 7552);
        assert_eq!(cfg.output_length(11), Some(1));
        assert_eq!(cfg.min_timesteps(), 10);
        match Cnn::new(44, 9, cfg) {
            Err(ModelError::TooShort { min, got }) => assert_eq!((min, got), (10, 9)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn logits_shape() {
        for (batch, t) in [(1, 11), (3, 40)] {
            let net = Cnn::new(4, t, CnnConfig::default()).unwrap();
            let params = net.init_params(1);
            let mut g = Graph::new();
            let ids: Vec<_> = params.into_iter().map(|p| g.leaf(p, false)).collect();
            let x = Tensor::from_fn(&[batch, 4, t], |i| (i as f64 * 0.37).sin()).unwrap();
            let out = net.forward(&mut g, &ids, &x).unwrap();
            assert_eq!(g.value(out).shape(), &[batch, 9]);
        }
    }
}
