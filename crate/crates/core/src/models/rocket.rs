use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ridge::{FeatureMatrix, DEFAULT_LAMBDA_GRID};
use super::{ModelError, Result, SeriesSet};

pub const ROCKET_KERNEL_LENGTHS: [usize; 3] = [7, 9, 11];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocketConfig {
    pub num_kernels: usize,
    pub lambda_grid: Vec<f64>,
    /// Mixed with the training seed to draw the kernels.
    pub seed: u64,
}

impl Default for RocketConfig {
    fn default() -> Self {
        Self {
            num_kernels: 10_000,
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            seed: 0,
        }
    }
}

impl RocketConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_kernels == 0 {
            return Err(ModelError::InvalidConfig("Rocket needs at least one kernel".into()));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(ModelError::InvalidConfig("lambda grid must be nonempty and positive".into()));
        }
        Ok(())
    }
}

/// A random dilated kernel reading a single input channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocketKernel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub dilation: usize,
    /// Zero padding on each side.
    pub padding: usize,
    pub channel: usize,
}

impl RocketKernel {
    fn draw(rng: &mut impl Rng, channels: usize, timesteps: usize) -> Self {
        let len = ROCKET_KERNEL_LENGTHS[rng.gen_range(0..ROCKET_KERNEL_LENGTHS.len())];
        let mut weights: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let mean = weights.iter().sum::<f64>() / len as f64;
        weights.iter_mut().for_each(|w| *w -= mean);
        let bias = rng.gen_range(-1.0..1.0);
        let max_exp = ((timesteps - 1) as f64 / (len - 1) as f64).log2().max(0.0);
        let dilation = (2f64.powf(rng.gen_range(0.0..=max_exp)) as usize).max(1);
        let padding = if rng.gen_bool(0.5) { (len - 1) * dilation / 2 } else { 0 };
        let channel = rng.gen_range(0..channels);
        Self {
            weights,
            bias,
            dilation,
            padding,
            channel,
        }
    }

    /// `(ppv, max)` of the convolution over one channel.
    pub fn apply(&self, x: &[f64]) -> (f64, f64) {
        let mut buf = Vec::new();
        self.apply_with(x, &mut buf)
    }

    /// As [`apply`](Self::apply), reusing `buf` for the convolution output.
    pub fn apply_with(&self, x: &[f64], buf: &mut Vec<f64>) -> (f64, f64) {
        let t = x.len();
        let span = (self.weights.len() - 1) * self.dilation;
        let pad = self.padding;
        if t + 2 * pad <= span {
            return (0.0, self.bias);
        }
        let out_len = t + 2 * pad - span;
        buf.clear();
        buf.resize(out_len, self.bias);
        // Output i reads x[i - pad + j * dilation]; each tap is a shifted axpy
        // over the outputs whose read index falls inside the series.
        for (j, &w) in self.weights.iter().enumerate() {
            let shift = j * self.dilation;
            let lo = pad.saturating_sub(shift);
            let hi = (t + pad).saturating_sub(shift).min(out_len);
            if lo >= hi {
                continue;
            }
            let src = &x[lo + shift - pad..hi + shift - pad];
            for (o, v) in buf[lo..hi].iter_mut().zip(src) {
                *o += w * v;
            }
        }
        let positive = buf.iter().filter(|&&v| v > 0.0).count();
        let max = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (positive as f64 / out_len as f64, max)
    }
}

/// A fixed kernel bank mapping `[channels, timesteps]` series to
/// `2 * kernels` features laid out `[ppv_0, max_0, ppv_1, max_1, ...]`.
#[derive(Debug, Clone)]
pub struct RocketTransform {
    channels: usize,
    timesteps: usize,
    kernels: Vec<RocketKernel>,
}

impl RocketTransform {
    pub fn generate(channels: usize, timesteps: usize, num_kernels: usize, seed: u64) -> Result<Self> {
        let min = *ROCKET_KERNEL_LENGTHS.iter().max().expect("nonempty");
        if timesteps < min {
            return Err(ModelError::TooShort { min, got: timesteps });
        }
        if channels == 0 || num_kernels == 0 {
            return Err(ModelError::InvalidConfig("Rocket needs channels and kernels".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = (0..num_kernels)
            .map(|_| RocketKernel::draw(&mut rng, channels, timesteps))
            .collect();
        Ok(Self {
            channels,
            timesteps,
            kernels,
        })
    }

    pub fn from_kernels(channels: usize, timesteps: usize, kernels: Vec<RocketKernel>) -> Self {
        Self {
            channels,
            timesteps,
            kernels,
        }
    }

    pub fn kernels(&self) -> &[RocketKernel] {
        &self.kernels
    }

    pub fn into_kernels(self) -> Vec<RocketKernel> {
        self.kernels
    }

    /// Samples run in parallel and each fills its own feature row, so the
    /// result matches a serial pass exactly.
    pub fn transform(&self, set: &SeriesSet) -> FeatureMatrix {
        debug_assert!(set.is_empty() || set.shape() == (self.channels, self.timesteps));
        let n = set.len();
        let t = self.timesteps;
        let cols = 2 * self.kernels.len();
        let mut values = vec![0.0; n * cols];
        values
            .par_chunks_mut(cols.max(1))
            .enumerate()
            .for_each_init(Vec::new, |buf, (i, row)| {
                let sample = set.sample(i);
                for (k, kernel) in self.kernels.iter().enumerate() {
                    let (ppv, max) = kernel.apply_with(&sample[kernel.channel * t..(kernel.channel + 1) * t], buf);
                    row[2 * k] = ppv;
                    row[2 * k + 1] = max;
                }
            });
        FeatureMatrix::new(n, cols, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Series;

    fn set(n: usize, c: usize, t: usize) -> SeriesSet {
        let series: Vec<Series> = (0..n)
            .map(|i| {
                let v = (0..c * t).map(|j| ((i * 31 + j * 7) as f64 * 0.13).sin()).collect();
                Series::new(c, t, v, (0..c).map(|k| k.to_string()).collect()).unwrap()
            })
            .collect();
        SeriesSet::new(series.iter().map(|s| (s, 0))).unwrap()
    }

    #[test]
    fn unit_kernel_by_hand() {
        let k = RocketKernel {
            weights: vec![1.0],
            bias: 0.0,
            dilation: 1,
            padding: 0,
            channel: 0,
        };
        let (ppv, max) = k.apply(&[-1.0, 2.0, -3.0]);
        assert!((ppv - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(max, 2.0);
    }

    #[test]
    fn matches_direct_convolution() {
        let x: Vec<f64> = (0..37).map(|i| ((i * 17 % 11) as f64 - 5.0) * 0.3).collect();
        let tr = RocketTransform::generate(1, 37, 300, 21).unwrap();
        for k in tr.kernels() {
            let len = k.weights.len();
            let out_len = 37 + 2 * k.padding - (len - 1) * k.dilation;
            let outputs: Vec<f64> = (0..out_len)
                .map(|i| {
                    k.bias
                        + (0..len)
                            .filter_map(|j| {
                                let idx = i as isize - k.padding as isize + (j * k.dilation) as isize;
                                (0..37).contains(&idx).then(|| k.weights[j] * x[idx as usize])
                            })
                            .sum::<f64>()
                })
                .collect();
            let ppv = outputs.iter().filter(|&&v| v > 0.0).count() as f64 / out_len as f64;
            let max = outputs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (p, m) = k.apply(&x);
            assert_eq!(p, ppv);
            assert!((m - max).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_series_reports_bias() {
        let tr = RocketTransform::generate(2, 30, 200, 5).unwrap();
        let zeros = Series::new(2, 30, vec![0.0; 60], vec!["a".into(), "b".into()]).unwrap();
        let feats = tr.transform(&SeriesSet::new([(&zeros, 0)]).unwrap());
        for (k, kernel) in tr.kernels().iter().enumerate() {
            let expected_ppv = if kernel.bias > 0.0 { 1.0 } else { 0.0 };
            assert_eq!(feats.row(0)[2 * k], expected_ppv);
            assert_eq!(feats.row(0)[2 * k + 1], kernel.bias);
        }
    }

    #[test]
    fn kernel_draws_respect_bounds() {
        let t = 50;
        let tr = RocketTransform::generate(3, t, 500, 9).unwrap();
        for k in tr.kernels() {
            assert!(ROCKET_KERNEL_LENGTHS.contains(&k.weights.len()));
            assert!(k.weights.iter().sum::<f64>().abs() < 1e-12);
            assert!((-1.0..1.0).contains(&k.bias));
            assert!((k.weights.len() - 1) * k.dilation <= t - 1);
            assert!(k.channel < 3);
        }
        let feats = tr.transform(&set(4, 3, t));
        for i in 0..4 {
            assert!(feats.row(i).iter().step_by(2).all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn too_short_is_rejected() {
        assert!(matches!(
            RocketTransform::generate(1, 10, 5, 0),
            Err(ModelError::TooShort { min: 11, got: 10 })
        ));
    }

    #[test]
    fn deterministic_and_row_order_independent() {
        let data = set(6, 2, 40);
        let a = RocketTransform::generate(2, 40, 300, 1).unwrap();
        let b = RocketTransform::generate(2, 40, 300, 1).unwrap();
        assert_eq!(a.kernels(), b.kernels());
        let fa = a.transform(&data);
        let perm = [4, 0, 5, 2, 1, 3];
        let series: Vec<Series> = perm
            .iter()
            .map(|&i| Series::new(2, 40, data.sample(i).to_vec(), vec!["0".into(), "1".into()]).unwrap())
            .collect();
        let permuted = SeriesSet::new(series.iter().map(|s| (s, 0))).unwrap();
        let fp = b.transform(&permuted);
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(fp.row(row), fa.row(src));
        }
    }
}
