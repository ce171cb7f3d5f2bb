//! Synthetic reaching trajectories for a planar two-link arm over a 3×3 board,
//! observed by fixed cameras.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{default_class_names, Dataset, DatasetError, LabeledSample, Provenance, Result, Series, NUM_CLASSES};
use crate::seed;

/// Image frame every camera projects into, in pixels.
pub const FRAME_WIDTH: f64 = 720.0;
pub const FRAME_HEIGHT: f64 = 1280.0;

/// Resting end-effector position (metres, base at the origin).
pub const HOME_POSITION: [f64; 2] = [0.0, 0.30];

const CELL_PITCH_X: f64 = 0.20;
const CELL_PITCH_Y: f64 = 0.17;
const BOARD_NEAR_Y: f64 = 0.45;
/// Board width; jitter is expressed as a fraction of it.
const WORKSPACE_EXTENT: f64 = 0.6;
const MAX_TIMING_SHIFT: f64 = 0.07;
/// Normalised-time phase boundaries: depart, arrive, leave, return.
const PHASES: [f64; 4] = [0.08, 0.42, 0.58, 0.92];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub timesteps: usize,
    pub samples_per_class: usize,
    pub cameras: usize,
    pub keypoints: usize,
    /// Standard deviation of the target offset, as a fraction of the board width.
    pub jitter_std: f64,
    /// Standard deviation of the schedule shift, as a fraction of the series length.
    pub timing_jitter: f64,
    pub seed: u64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            timesteps: 481,
            samples_per_class: 50,
            cameras: 2,
            keypoints: 11,
            jitter_std: 0.01,
            timing_jitter: 0.05,
            seed: 0,
        }
    }
}

impl GeneratorParams {
    pub fn channels(&self) -> usize {
        self.cameras * self.keypoints * 2
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DatasetError::InvalidParams(m.to_string()));
        if self.samples_per_class < 1 {
            return bad("samples_per_class must be at least 1");
        }
        if self.keypoints < 2 {
            return bad("keypoints must be at least 2");
        }
        if self.timesteps < 4 {
            return bad("timesteps must be at least 4");
        }
        if self.cameras < 1 {
            return bad("cameras must be at least 1");
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) || !(self.timing_jitter >= 0.0 && self.timing_jitter.is_finite()) {
            return bad("jitter parameters must be finite and non-negative");
        }
        Ok(())
    }
}

/// Minimum-jerk position profile on `[0, 1]`.
pub fn minimum_jerk(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

/// Centre of the board cell for `label` (row-major, row 0 nearest the base).
pub fn cell_center(label: usize) -> [f64; 2] {
    let (row, col) = (label / 3, label % 3);
    [(col as f64 - 1.0) * CELL_PITCH_X, BOARD_NEAR_Y + row as f64 * CELL_PITCH_Y]
}

/// Two-link planar arm with a fixed base at the origin.
#[derive(Debug, Clone, Copy)]
pub struct ArmGeometry {
    pub upper: f64,
    pub fore: f64,
}

impl Default for ArmGeometry {
    fn default() -> Self {
        Self { upper: 0.55, fore: 0.45 }
    }
}

impl ArmGeometry {
    /// Elbow-up inverse kinematics. Returns `(elbow, end_effector)`; targets
    /// outside the annulus of reach are pulled onto its boundary.
    pub fn solve(&self, target: [f64; 2]) -> ([f64; 2], [f64; 2]) {
        let (l1, l2) = (self.upper, self.fore);
        let reach = target[0].hypot(target[1]);
        let lo = (l1 - l2).abs() + 1e-9;
        let hi = l1 + l2 - 1e-9;
        let r = reach.clamp(lo, hi);
        let dir = if reach > 0.0 { [target[0] / reach, target[1] / reach] } else { [0.0, 1.0] };
        let p = [dir[0] * r, dir[1] * r];
        let cos_q2 = ((r * r - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
        let q2 = -cos_q2.acos();
        let q1 = p[1].atan2(p[0]) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
        let elbow = [l1 * q1.cos(), l1 * q1.sin()];
        let ee = [elbow[0] + l2 * (q1 + q2).cos(), elbow[1] + l2 * (q1 + q2).sin()];
        (elbow, ee)
    }

    /// World positions of every keypoint, ordered mounts, arm chain, base.
    fn keypoints(&self, layout: &KeypointLayout, ee_target: [f64; 2], out: &mut Vec<[f64; 2]>) {
        out.clear();
        out.extend_from_slice(&MOUNT_OFFSETS[..layout.mounts]);
        let (elbow, ee) = self.solve(ee_target);
        let total = self.upper + self.fore;
        for i in 1..=layout.chain {
            let s = total * i as f64 / layout.chain as f64;
            let p = if s <= self.upper {
                let f = s / self.upper;
                [elbow[0] * f, elbow[1] * f]
            } else {
                let f = (s - self.upper) / self.fore;
                [elbow[0] + (ee[0] - elbow[0]) * f, elbow[1] + (ee[1] - elbow[1]) * f]
            };
            out.push(p);
        }
        out.push([0.0, 0.0]);
    }
}

const MOUNT_OFFSETS: [[f64; 2]; 4] = [[-0.10, -0.06], [0.10, -0.06], [0.10, 0.06], [-0.10, 0.06]];

/// Split of `K` keypoints into fixed mounts, points along the arm, and the base.
struct KeypointLayout {
    mounts: usize,
    chain: usize,
}

impl KeypointLayout {
    fn new(keypoints: usize) -> Self {
        let mounts = (keypoints - 1).saturating_sub(6).min(MOUNT_OFFSETS.len());
        Self {
            mounts,
            chain: keypoints - 1 - mounts,
        }
    }

    fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.mounts).map(|i| format!("m{i}")).collect();
        names.extend((1..=self.chain).map(|i| format!("j{i}")));
        names.push("b".into());
        names
    }
}

/// Fixed affine view of camera `j`: world metres to image pixels.
fn camera_transform(j: usize) -> impl Fn([f64; 2]) -> [f64; 2] {
    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
    let theta = 0.35 * j as f64 * sign;
    let scale = 330.0 / (1.0 + 0.05 * j as f64);
    let shear = 0.05 * (j % 3) as f64;
    let cx = FRAME_WIDTH / 2.0;
    let cy = FRAME_HEIGHT / 2.0 + 30.0 * (j % 5) as f64 * sign;
    let (s, c) = theta.sin_cos();
    move |p: [f64; 2]| {
        let x = p[0] + shear * p[1];
        let y = -p[1];
        [cx + scale * (c * x - s * y), cy + scale * (s * x + c * y)]
    }
}

/// Target and timing of one synthetic reach.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub target: [f64; 2],
    pub shift: f64,
}

impl SamplePlan {
    pub fn draw(params: &GeneratorParams, label: usize, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(params.seed, &[label as u64, index as u64]));
        let center = cell_center(label);
        let sigma = params.jitter_std * WORKSPACE_EXTENT;
        let mut target = center;
        if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("positive sigma");
            target[0] += n.sample(&mut rng);
            target[1] += n.sample(&mut rng);
        }
        let shift = if params.timing_jitter > 0.0 {
            Normal::new(0.0, params.timing_jitter)
                .expect("positive sigma")
                .sample(&mut rng)
                .clamp(-MAX_TIMING_SHIFT, MAX_TIMING_SHIFT)
        } else {
            0.0
        };
        Self { target, shift }
    }

    /// End-effector set-point at normalised time `u ∈ [0, 1]`.
    pub fn end_effector(&self, u: f64) -> [f64; 2] {
        let [a, b, c, d] = PHASES.map(|p| p + self.shift);
        let lerp = |from: [f64; 2], to: [f64; 2], s: f64| [from[0] + (to[0] - from[0]) * s, from[1] + (to[1] - from[1]) * s];
        if u <= a || u >= d {
            HOME_POSITION
        } else if u < b {
            lerp(HOME_POSITION, self.target, minimum_jerk((u - a) / (b - a)))
        } else if u <= c {
            self.target
        } else {
            lerp(self.target, HOME_POSITION, minimum_jerk((u - c) / (d - c)))
        }
    }
}

fn render(params: &GeneratorParams, plan: &SamplePlan, layout: &KeypointLayout, names: &[String]) -> Series {
    let arm = ArmGeometry::default();
    let t_len = params.timesteps;
    let k = params.keypoints;
    let cameras: Vec<_> = (0..params.cameras).map(camera_transform).collect();
    let mut values = vec![0.0; params.channels() * t_len];
    let mut world = Vec::with_capacity(k);
    for t in 0..t_len {
        let u = t as f64 / (t_len - 1) as f64;
        arm.keypoints(layout, plan.end_effector(u), &mut world);
        for (j, cam) in cameras.iter().enumerate() {
            for (kp, &p) in world.iter().enumerate() {
                let px = cam(p);
                let ch = (j * k + kp) * 2;
                values[ch * t_len + t] = px[0];
                values[(ch + 1) * t_len + t] = px[1];
            }
        }
    }
    Series::new(params.channels(), t_len, values, names.to_vec()).expect("generator output is well-formed")
}

/// Channel names, camera-major then keypoint then axis: `cam1.j3.x`.
fn channel_names(params: &GeneratorParams, layout: &KeypointLayout) -> Vec<String> {
    let kp_names = layout.names();
    let mut names = Vec::with_capacity(params.channels());
    for j in 1..=params.cameras {
        for kp in &kp_names {
            names.push(format!("cam{j}.{kp}.x"));
            names.push(format!("cam{j}.{kp}.y"));
        }
    }
    names
}

pub fn generate(params: &GeneratorParams) -> Result<Dataset> {
    params.validate()?;
    let layout = KeypointLayout::new(params.keypoints);
    let names = channel_names(params, &layout);
    let jobs: Vec<(usize, usize)> = (0..NUM_CLASSES)
        .flat_map(|label| (0..params.samples_per_class).map(move |i| (label, i)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(label, i)| {
            let plan = SamplePlan::draw(params, label, i);
            LabeledSample {
                series: render(params, &plan, &layout, &names),
                label,
                sample_id: format!("c{label}_{i:03}"),
            }
        })
        .collect();
    Dataset::new(
        samples,
        default_class_names(),
        Provenance::Synthetic {
            seed: params.seed,
            params: params.clone(),
        },
    )
}
