//! Cut-out, salt & pepper, and Gaussian corruption of keypoint series.
//!
//! Every injector is a pure function of `(series, spec)`: the input is never
//! modified and the same seed always produces the same output.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Series;

/// Noise levels swept by the benchmark, in percent.
pub const NOISE_LEVELS: [u8; 5] = [10, 20, 30, 40, 50];
pub const DEFAULT_REGION_SIZE: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("unknown noise family '{0}'")]
    UnknownFamily(String),
    #[error("noise level {0}% is not one of 10, 20, 30, 40, 50")]
    Level(u8),
    #[error("cut-out region of {region} steps does not fit a series of {timesteps}")]
    RegionTooLarge { region: usize, timesteps: usize },
    #[error("cut-out region size must be positive")]
    EmptyRegion,
    #[error("{expected} injector called with a {actual} spec")]
    WrongFamily { expected: NoiseFamily, actual: NoiseFamily },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Cutout,
    SaltPepper,
    Gaussian,
}

impl NoiseFamily {
    pub const ALL: [NoiseFamily; 3] = [NoiseFamily::Cutout, NoiseFamily::SaltPepper, NoiseFamily::Gaussian];

    pub fn key(self) -> &'static str {
        match self {
            NoiseFamily::Cutout => "cutout",
            NoiseFamily::SaltPepper => "salt_pepper",
            NoiseFamily::Gaussian => "gaussian",
        }
    }

    /// Human-readable label used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            NoiseFamily::Cutout => "Cut-out",
            NoiseFamily::SaltPepper => "Salt & Pepper",
            NoiseFamily::Gaussian => "Gaussian",
        }
    }
}

impl fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for NoiseFamily {
    type Err = NoiseError;

    fn from_str(s: &str) -> Result<Self, NoiseError> {
        match s.trim().to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "cutout" | "cut_out" => Ok(Self::Cutout),
            "salt_pepper" | "saltpepper" | "salt_and_pepper" | "s&p" => Ok(Self::SaltPepper),
            "gaussian" => Ok(Self::Gaussian),
            _ => Err(NoiseError::UnknownFamily(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    level_percent: u8,
    pub region_size: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(family: NoiseFamily, level_percent: u8, seed: u64) -> Result<Self, NoiseError> {
        if !NOISE_LEVELS.contains(&level_percent) {
            return Err(NoiseError::Level(level_percent));
        }
        Ok(Self {
            family,
            level_percent,
            region_size: DEFAULT_REGION_SIZE,
            seed,
        })
    }

    pub fn with_region_size(mut self, region_size: usize) -> Result<Self, NoiseError> {
        if region_size == 0 {
            return Err(NoiseError::EmptyRegion);
        }
        self.region_size = region_size;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn level_percent(&self) -> u8 {
        self.level_percent
    }

    pub fn fraction(&self) -> f64 {
        self.level_percent as f64 / 100.0
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn expect(&self, family: NoiseFamily) -> Result<(), NoiseError> {
        if self.family == family {
            Ok(())
        } else {
            Err(NoiseError::WrongFamily {
                expected: family,
                actual: self.family,
            })
        }
    }
}

/// Start offsets of the cut-out windows for a series of `timesteps` steps.
///
/// The number of windows is the one whose total length is nearest the target
/// fraction. Windows never overlap and never run past the end; placements
/// are uniform over all such arrangements.
pub fn cutout_windows(timesteps: usize, spec: &NoiseSpec) -> Result<Vec<usize>, NoiseError> {
    let region = spec.region_size;
    if region > timesteps {
        return Err(NoiseError::RegionTooLarge { region, timesteps });
    }
    let target = spec.fraction() * timesteps as f64;
    let count = ((target / region as f64).round() as usize).min(timesteps / region);
    let slack = timesteps - count * region;
    let mut rng = spec.rng();
    let mut gaps: Vec<usize> = (0..count).map(|_| rng.gen_range(0..=slack)).collect();
    gaps.sort_unstable();
    Ok(gaps.into_iter().enumerate().map(|(i, g)| g + i * region).collect())
}

/// Zeroes whole time windows across every channel, as if frames were dropped.
pub fn apply_cutout(series: &Series, spec: &NoiseSpec) -> Result<Series, NoiseError> {
    spec.expect(NoiseFamily::Cutout)?;
    let t_len = series.timesteps();
    let starts = cutout_windows(t_len, spec)?;
    let mut values = series.values().to_vec();
    for chunk in values.chunks_mut(t_len) {
        for &s in &starts {
            chunk[s..s + spec.region_size].fill(0.0);
        }
    }
    Ok(series.with_values(values))
}

/// Replaces each cell with probability `level` by its channel's max (salt) or
/// min (pepper), chosen with equal odds.
pub fn apply_salt_pepper(series: &Series, spec: &NoiseSpec) -> Result<Series, NoiseError> {
    spec.expect(NoiseFamily::SaltPepper)?;
    let t_len = series.timesteps();
    let p = spec.fraction();
    let ranges = series.channel_ranges();
    let mut rng = spec.rng();
    let mut values = series.values().to_vec();
    for (chunk, (lo, hi)) in values.chunks_mut(t_len).zip(ranges) {
        for v in chunk.iter_mut() {
            if rng.gen_bool(p) {
                *v = if rng.gen_bool(0.5) { hi } else { lo };
            }
        }
    }
    Ok(series.with_values(values))
}

/// Adds zero-mean Gaussian noise with σ = level × (channel max − channel min).
pub fn apply_gaussian(series: &Series, spec: &NoiseSpec) -> Result<Series, NoiseError> {
    spec.expect(NoiseFamily::Gaussian)?;
    let t_len = series.timesteps();
    let ranges = series.channel_ranges();
    let mut rng = spec.rng();
    let mut values = series.values().to_vec();
    for (chunk, (lo, hi)) in values.chunks_mut(t_len).zip(ranges) {
        let sigma = spec.fraction() * (hi - lo);
        for v in chunk.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    Ok(series.with_values(values))
}

pub fn apply(series: &Series, spec: &NoiseSpec) -> Result<Series, NoiseError> {
    match spec.family {
        NoiseFamily::Cutout => apply_cutout(series, spec),
        NoiseFamily::SaltPepper => apply_salt_pepper(series, spec),
        NoiseFamily::Gaussian => apply_gaussian(series, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(channels: usize, t: usize) -> Series {
        let values = (0..channels * t).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let names = (0..channels).map(|c| format!("c{c}")).collect();
        Series::new(channels, t, values, names).unwrap()
    }

    fn spec(family: NoiseFamily, level: u8, seed: u64) -> NoiseSpec {
        NoiseSpec::new(family, level, seed).unwrap()
    }

    #[test]
    fn level_validation() {
        assert_eq!(NoiseSpec::new(NoiseFamily::Gaussian, 0, 0), Err(NoiseError::Level(0)));
        assert_eq!(NoiseSpec::new(NoiseFamily::Gaussian, 15, 0), Err(NoiseError::Level(15)));
        assert_eq!(spec(NoiseFamily::Cutout, 10, 0).region_size, 10);
        assert!("pink".parse::<NoiseFamily>().is_err());
        assert_eq!("salt_pepper".parse::<NoiseFamily>().unwrap(), NoiseFamily::SaltPepper);
    }

    #[test]
    fn cutout_at_481_steps() {
        let s = ramp(3, 481).with_values(vec![1.0; 3 * 481]);
        for seed in 0..20 {
            let out = apply_cutout(&s, &spec(NoiseFamily::Cutout, 10, seed)).unwrap();
            let zeroed = out.channel(0).iter().filter(|&&v| v == 0.0).count();
            assert!(zeroed == 48 || zeroed == 50, "{zeroed}");
            for c in 1..3 {
                assert_eq!(out.channel(c), out.channel(0));
            }
        }
    }

    #[test]
    fn cutout_masks_only_windows() {
        let s = ramp(2, 200);
        let sp = spec(NoiseFamily::Cutout, 30, 4);
        let starts = cutout_windows(200, &sp).unwrap();
        let out = apply_cutout(&s, &sp).unwrap();
        let mut masked = vec![false; 200];
        for &st in &starts {
            assert!(st + 10 <= 200);
            for m in &mut masked[st..st + 10] {
                assert!(!*m, "windows overlap");
                *m = true;
            }
        }
        for c in 0..2 {
            for t in 0..200 {
                if masked[t] {
                    assert_eq!(out.channel(c)[t], 0.0);
                } else {
                    assert_eq!(out.channel(c)[t].to_bits(), s.channel(c)[t].to_bits());
                }
            }
        }
        assert_eq!(s, ramp(2, 200), "input untouched");
    }

    #[test]
    fn cutout_region_too_large() {
        let sp = spec(NoiseFamily::Cutout, 10, 0).with_region_size(30).unwrap();
        assert_eq!(
            apply_cutout(&ramp(1, 20), &sp),
            Err(NoiseError::RegionTooLarge { region: 30, timesteps: 20 })
        );
    }

    #[test]
    fn salt_pepper_values_and_constant_channel() {
        let s = ramp(4, 300);
        let out = apply_salt_pepper(&s, &spec(NoiseFamily::SaltPepper, 40, 1)).unwrap();
        for (c, (lo, hi)) in s.channel_ranges().into_iter().enumerate() {
            for (a, b) in s.channel(c).iter().zip(out.channel(c)) {
                assert!(a.to_bits() == b.to_bits() || *b == lo || *b == hi);
            }
        }
        let flat = s.with_values(vec![0.7; 4 * 300]);
        let out = apply_salt_pepper(&flat, &spec(NoiseFamily::SaltPepper, 50, 1)).unwrap();
        assert_eq!(out, flat);
    }

    #[test]
    fn gaussian_constant_channel_unchanged() {
        let flat = ramp(2, 50).with_values(vec![3.0; 100]);
        assert_eq!(apply_gaussian(&flat, &spec(NoiseFamily::Gaussian, 50, 9)).unwrap(), flat);
    }

    #[test]
    fn dispatch_and_determinism() {
        let s = ramp(3, 100);
        for family in NoiseFamily::ALL {
            let a = apply(&s, &spec(family, 20, 5)).unwrap();
            let b = apply(&s, &spec(family, 20, 5)).unwrap();
            let c = apply(&s, &spec(family, 20, 6)).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c, "{family}");
        }
        let direct = apply_cutout(&s, &spec(NoiseFamily::Cutout, 20, 5)).unwrap();
        assert_eq!(apply(&s, &spec(NoiseFamily::Cutout, 20, 5)).unwrap(), direct);
        assert!(matches!(
            apply_gaussian(&s, &spec(NoiseFamily::Cutout, 20, 5)),
            Err(NoiseError::WrongFamily { .. })
        ));
    }
}
