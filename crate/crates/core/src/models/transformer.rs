use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fan_in_uniform, ModelError, Network, Result};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub heads: usize,
    pub ffn_dim: usize,
    pub blocks: usize,
    pub model_dim: usize,
    pub classes: usize,
    /// Non-overlapping average pooling over time applied to the input before
    /// projection. 1 keeps every timestep.
    pub time_pool: usize,
    pub positional_encoding: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            ffn_dim: 128,
            blocks: 4,
            model_dim: 64,
            classes: 9,
            time_pool: 8,
            positional_encoding: true,
        }
    }
}

const PARAMS_PER_BLOCK: usize = 16;

/// Standard sine/cosine position table, `[steps, dim]`.
pub fn sinusoidal_encoding(steps: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[steps, dim], |i| {
        let (pos, j) = ((i / dim) as f64, i % dim);
        let rate = 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        if j % 2 == 0 {
            (pos / rate).sin()
        } else {
            (pos / rate).cos()
        }
    })
    .expect("finite table")
}

/// Post-norm encoder: projection, positional encoding, `blocks` × (attention
/// + residual + layer norm, feed-forward + residual + layer norm), mean over
/// time, linear head.
#[derive(Debug, Clone)]
pub struct Transformer {
    cfg: TransformerConfig,
    channels: usize,
    timesteps: usize,
    steps: usize,
    encoding: Option<Tensor>,
}

impl Transformer {
    pub fn new(channels: usize, timesteps: usize, cfg: TransformerConfig) -> Result<Self> {
        if cfg.heads == 0 || cfg.model_dim % cfg.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "model_dim {} is not divisible by {} heads",
                cfg.model_dim, cfg.heads
            )));
        }
        if [cfg.ffn_dim, cfg.model_dim, cfg.classes, cfg.time_pool].contains(&0) {
            return Err(ModelError::InvalidConfig("transformer sizes must be positive".into()));
        }
        if timesteps < cfg.time_pool {
            return Err(ModelError::TooShort {
                min: cfg.time_pool,
                got: timesteps,
            });
        }
        let steps = timesteps / cfg.time_pool;
        let encoding = cfg.positional_encoding.then(|| sinusoidal_encoding(steps, cfg.model_dim));
        Ok(Self {
            cfg,
            channels,
            timesteps,
            steps,
            encoding,
        })
    }

    /// Sequence length seen by the encoder after time pooling.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `[batch, channels, timesteps]` → time-pooled `[batch, steps, channels]`.
    fn prepare(&self, input: &Tensor) -> std::result::Result<Tensor, TensorError> {
        let s = input.shape();
        if s.len() != 3 || s[1] != self.channels || s[2] != self.timesteps {
            return Err(TensorError::ShapeMismatch {
                op: "transformer_input",
                expected: format!("[batch, {}, {}]", self.channels, self.timesteps),
                actual: s.to_vec(),
            });
        }
        let (batch, c, t, pool) = (s[0], self.channels, self.timesteps, self.cfg.time_pool);
        let x = input.values();
        let scale = 1.0 / pool as f64;
        let mut out = vec![0.0; batch * self.steps * c];
        for n in 0..batch {
            for ch in 0..c {
                let row = &x[(n * c + ch) * t..(n * c + ch + 1) * t];
                for step in 0..self.steps {
                    let mean = row[step * pool..(step + 1) * pool].iter().sum::<f64>() * scale;
                    out[(n * self.steps + step) * c + ch] = mean;
                }
            }
        }
        Tensor::new(vec![batch, self.steps, c], out)
    }

    /// Forward pass that also returns the attention nodes of every block.
    pub fn encode(&self, g: &mut Graph, p: &[NodeId], input: &Tensor) -> std::result::Result<(NodeId, Vec<NodeId>), TensorError> {
        let x = g.leaf(self.prepare(input)?, false);
        let mut h = g.dense(x, p[0], p[1])?;
        if let Some(enc) = &self.encoding {
            let pe = g.leaf(enc.clone(), false);
            h = g.add(h, pe)?;
        }
        let mut attn_nodes = Vec::with_capacity(self.cfg.blocks);
        for b in 0..self.cfg.blocks {
            let w = &p[2 + b * PARAMS_PER_BLOCK..2 + (b + 1) * PARAMS_PER_BLOCK];
            let q = g.dense(h, w[0], w[1])?;
            let k = g.dense(h, w[2], w[3])?;
            let v = g.dense(h, w[4], w[5])?;
            let a = g.attention(q, k, v, self.cfg.heads)?;
            attn_nodes.push(a);
            let o = g.dense(a, w[6], w[7])?;
            let r = g.add(h, o)?;
            h = g.layer_norm(r, w[8], w[9])?;
            let f = g.dense(h, w[10], w[11])?;
            let f = g.relu(f)?;
            let f = g.dense(f, w[12], w[13])?;
            let r = g.add(h, f)?;
            h = g.layer_norm(r, w[14], w[15])?;
        }
        let pooled = g.global_avg_pool1d(h)?;
        let head = 2 + self.cfg.blocks * PARAMS_PER_BLOCK;
        let logits = g.dense(pooled, p[head], p[head + 1])?;
        Ok((logits, attn_nodes))
    }
}

impl Network for Transformer {
    fn init_params(&self, seed: u64) -> Vec<Tensor> {
        let (c, d, f) = (self.channels, self.cfg.model_dim, self.cfg.ffn_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![fan_in_uniform(&mut rng, &[c, d], c), Tensor::zeros(&[d])];
        for _ in 0..self.cfg.blocks {
            for _ in 0..4 {
                p.push(fan_in_uniform(&mut rng, &[d, d], d));
                p.push(Tensor::zeros(&[d]));
            }
            p.push(Tensor::from_fn(&[d], |_| 1.0).expect("finite"));
            p.push(Tensor::zeros(&[d]));
            p.push(fan_in_uniform(&mut rng, &[d, f], d));
            p.push(Tensor::zeros(&[f]));
            p.push(fan_in_uniform(&mut rng, &[f, d], f));
            p.push(Tensor::zeros(&[d]));
            p.push(Tensor::from_fn(&[d], |_| 1.0).expect("finite"));
            p.push(Tensor::zeros(&[d]));
        }
        p.push(fan_in_uniform(&mut rng, &[d, self.cfg.classes], d));
        p.push(Tensor::zeros(&[self.cfg.classes]));
        p
    }

    fn forward(&self, g: &mut Graph, params: &[NodeId], input: &Tensor) -> std::result::Result<NodeId, TensorError> {
        self.encode(g, params, input).map(|(logits, _)| logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(pe: bool) -> TransformerConfig {
        TransformerConfig {
            model_dim: 8,
            ffn_dim: 16,
            blocks: 2,
            time_pool: 1,
            positional_encoding: pe,
            ..Default::default()
        }
    }

    fn run(net: &Transformer, params: &[Tensor], x: &Tensor) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let ids: Vec<_> = params.iter().map(|p| g.leaf(p.clone(), false)).collect();
        let (logits, attn) = net.encode(&mut g, &ids, x).unwrap();
        let maps = attn.iter().map(|&a| g.attention_weights(a).unwrap().to_vec()).collect();
        (g.value(logits).values().to_vec(), maps)
    }

    #[test]
    fn rejects_indivisible_dim() {
        let cfg = TransformerConfig { model_dim: 10, ..tiny(true) };
        assert!(matches!(Transformer::new(2, 12, cfg), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn logits_shape_and_attention_rows() {
        let net = Transformer::new(3, 12, tiny(true)).unwrap();
        let params = net.init_params(4);
        let x = Tensor::from_fn(&[2, 3, 12], |i| (i as f64 * 0.21).cos()).unwrap();
        let (logits, maps) = run(&net, &params, &x);
        assert_eq!(logits.len(), 2 * 9);
        for map in maps {
            for row in map.chunks(12) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let pooled = Transformer::new(3, 481, TransformerConfig::default()).unwrap();
        assert_eq!(pooled.steps(), 60);
    }

    #[test]
    fn permutation_invariant_without_positions() {
        let (c, t) = (3, 10);
        let net = Transformer::new(c, t, tiny(false)).unwrap();
        let params = net.init_params(8);
        let x = Tensor::from_fn(&[1, c, t], |i| ((i * 13 % 7) as f64 - 3.0) * 0.4).unwrap();
        let perm = [3, 7, 0, 9, 1, 5, 2, 8, 4, 6];
        let mut shuffled = vec![0.0; c * t];
        for ch in 0..c {
            for (dst, &src) in perm.iter().enumerate() {
                shuffled[ch * t + dst] = x.values()[ch * t + src];
            }
        }
        let xp = Tensor::new(vec![1, c, t], shuffled).unwrap();
        let (a, _) = run(&net, &params, &x);
        let (b, _) = run(&net, &params, &xp);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10, "{u} vs {v}");
        }
        let with_pe = Transformer::new(c, t, tiny(true)).unwrap();
        let (a, _) = run(&with_pe, &params, &x);
        let (b, _) = run(&with_pe, &params, &xp);
        assert!(a.iter().zip(&b).any(|(u, v)| (u - v).abs() > 1e-6));
    }
}
