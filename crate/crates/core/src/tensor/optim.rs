use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// Learning rates explored by the optimizer grid search.
pub const LEARNING_RATE_GRID: [f64; 3] = [0.001, 0.01, 0.1];

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const RMSPROP_RHO: f64 = 0.9;
const EPS: f64 = 1e-8;

/// Ordering doubles as the grid-search tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Rmsprop,
    Sgd,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [OptimizerKind::Adam, OptimizerKind::Rmsprop, OptimizerKind::Sgd];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Self::Adam),
            "rmsprop" => Ok(Self::Rmsprop),
            "sgd" => Ok(Self::Sgd),
            other => Err(format!("unknown optimizer '{other}'")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !LEARNING_RATE_GRID.contains(&learning_rate) {
            return Err(TensorError::LearningRateOffGrid(learning_rate));
        }
        Ok(Self {
            kind,
            learning_rate,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::Invalid(format!(
                "optimizer got {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "optimizer_step",
                    expected: format!("{:?}", p.shape()),
                    actual: g.shape().to_vec(),
                });
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.values_mut().iter_mut().zip(g.values()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Rmsprop => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.second_moment) {
                    for ((w, d), s) in p.values_mut().iter_mut().zip(g.values()).zip(v.iter_mut()) {
                        *s = RMSPROP_RHO * *s + (1.0 - RMSPROP_RHO) * d * d;
                        *w -= lr * d / (s.sqrt() + EPS);
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    for (((w, d), m), v) in p.values_mut().iter_mut().zip(g.values()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * d;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * d * d;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(v).unwrap()]
    }

    #[test]
    fn sgd_step() {
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1).unwrap();
        let mut p = one(1.0);
        opt.step(&mut p, &one(2.0)).unwrap();
        assert!((p[0].values()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // First step: m̂ = g, v̂ = g², so Δ = lr * g / (|g| + ε).
        for g in [1e-3, 0.5, -7.0, 1234.0] {
            let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.001).unwrap();
            let mut p = one(3.0);
            opt.step(&mut p, &one(g)).unwrap();
            let delta = (p[0].values()[0] - 3.0).abs();
            let expected = 0.001 * g.abs() / (g.abs() + 1e-8);
            assert!((delta - expected).abs() < 1e-15, "g={g}: {delta}");
            assert!((delta - 0.001).abs() < 1e-8);
        }
    }

    #[test]
    fn rmsprop_first_step() {
        let mut opt = OptimizerState::new(OptimizerKind::Rmsprop, 0.01).unwrap();
        let mut p = one(0.0);
        opt.step(&mut p, &one(2.0)).unwrap();
        // s = 0.1 * 4 = 0.4
        let expected = -0.01 * 2.0 / (0.4f64.sqrt() + 1e-8);
        assert!((p[0].values()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        for kind in OptimizerKind::ALL {
            let mut opt = OptimizerState::new(kind, 0.1).unwrap();
            let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
            let g = vec![Tensor::zeros(&[3])];
            for _ in 0..3 {
                opt.step(&mut p, &g).unwrap();
            }
            assert_eq!(p[0].values(), &[1.0, -2.0, 0.5], "{kind:?}");
        }
    }

    #[test]
    fn rejects_off_grid_rate_and_mismatch() {
        assert!(OptimizerState::new(OptimizerKind::Adam, 0.5).is_err());
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.01).unwrap();
        let mut p = vec![Tensor::zeros(&[2])];
        assert!(opt.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
    }
}
