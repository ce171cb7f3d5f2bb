use serde::{Deserialize, Serialize};

use super::Series;

/// Per-channel min-max scaling to `[0, 1]`. Constant channels map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    /// Fits on every timestep of every series yielded. Panics on an empty iterator.
    pub fn fit<'a>(series: impl IntoIterator<Item = &'a Series>) -> Self {
        let mut it = series.into_iter().peekable();
        let channels = it.peek().expect("fit needs at least one series").channels();
        let mut min = vec![f64::INFINITY; channels];
        let mut max = vec![f64::NEG_INFINITY; channels];
        for s in it {
            for (c, (lo, hi)) in s.channel_ranges().into_iter().enumerate() {
                min[c] = min[c].min(lo);
                max[c] = max[c].max(hi);
            }
        }
        Self { min, max }
    }

    pub fn transform(&self, series: &Series) -> Series {
        let t = series.timesteps();
        let mut values = series.values().to_vec();
        for (c, chunk) in values.chunks_mut(t).enumerate() {
            let range = self.max[c] - self.min[c];
            if range > 0.0 {
                chunk.iter_mut().for_each(|v| *v = (*v - self.min[c]) / range);
            } else {
                chunk.fill(0.0);
            }
        }
        series.with_values(values)
    }
}
