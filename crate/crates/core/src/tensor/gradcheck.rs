//! Central finite-difference gradient checks.
//!
//! Every check reduces the op output to a scalar through a fixed random
//! projection, then compares the tape's gradient against
//! `(f(x + ε) - f(x - ε)) / 2ε` for each input entry. Only forward passes feed
//! the numeric side, so the oracle never touches backward rules.
//!
//! ReLU and max-pool are piecewise smooth. A perturbation that flips a branch
//! makes the difference quotient meaningless, so such points are detected via
//! [`Graph::branch_signature`] and the whole check is redrawn from a new seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Result, Tensor, TensorError};

pub const DEFAULT_EPSILON: f64 = 1e-4;
/// Errors are measured relative to `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-3;
const MAX_ATTEMPTS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
    /// Draws needed before a branch-stable point was found.
    pub attempts: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale)).expect("finite by construction")
}

type Build<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'a;

fn evaluate(build: &Build<'_>, inputs: &[Tensor], projection: &Tensor, track: bool) -> Result<(Graph, Vec<NodeId>, NodeId)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
    let out = build(&mut g, &ids)?;
    let r = g.leaf(projection.clone(), false);
    let prod = g.mul(out, r)?;
    let loss = g.sum(prod)?;
    Ok((g, ids, loss))
}

enum Outcome {
    Done { max_rel_error: f64, entries: usize },
    BranchCrossed,
}

fn check_once(build: &Build<'_>, inputs: &[Tensor], rng: &mut ChaCha8Rng, eps: f64) -> Result<Outcome> {
    let out_shape = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &ids)?;
        g.value(out).shape().to_vec()
    };
    let projection = random_tensor(rng, &out_shape, 1.0);
    let (mut g, ids, loss) = evaluate(build, inputs, &projection, true)?;
    let signature = g.branch_signature();
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let base = inputs[i].values()[j];
            let mut side = |delta: f64| -> Result<(f64, u64)> {
                probe[i].values_mut()[j] = base + delta;
                let (g, _, loss) = evaluate(build, &probe, &projection, false)?;
                Ok((g.value(loss).values()[0], g.branch_signature()))
            };
            let (plus, sig_plus) = side(eps)?;
            let (minus, sig_minus) = side(-eps)?;
            probe[i].values_mut()[j] = base;
            if sig_plus != signature || sig_minus != signature {
                return Ok(Outcome::BranchCrossed);
            }
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grads[j], numeric));
            entries += 1;
        }
    }
    Ok(Outcome::Done {
        max_rel_error: worst,
        entries,
    })
}

/// Draws inputs with `make_inputs` and checks `build`, redrawing whenever a
/// perturbation crosses a ReLU or max-pool branch.
pub fn check_gradients(
    name: &str,
    seed: u64,
    make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 1..=MAX_ATTEMPTS {
        let inputs = make_inputs(&mut rng);
        match check_once(&build, &inputs, &mut rng, DEFAULT_EPSILON)? {
            Outcome::Done { max_rel_error, entries } => {
                return Ok(GradCheckReport {
                    name: name.to_string(),
                    max_rel_error,
                    entries,
                    attempts: attempt,
                })
            }
            Outcome::BranchCrossed => continue,
        }
    }
    Err(TensorError::Invalid(format!(
        "{name}: no branch-stable point found in {MAX_ATTEMPTS} draws"
    )))
}

/// Gradient checks for every primitive op on small random shapes.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let shapes = |s: &'static [&'static [usize]]| move |rng: &mut ChaCha8Rng| s.iter().map(|sh| random_tensor(rng, sh, 1.0)).collect::<Vec<_>>();
    let mut reports = vec![
        check_gradients("matmul", seed, shapes(&[&[3, 4], &[4, 2]]), |g, x| g.matmul(x[0], x[1]))?,
        check_gradients("dense", seed + 1, shapes(&[&[2, 3, 4], &[4, 5], &[5]]), |g, x| g.dense(x[0], x[1], x[2]))?,
        check_gradients("conv1d", seed + 2, shapes(&[&[2, 3, 7], &[4, 3, 3], &[4]]), |g, x| g.conv1d(x[0], x[1], x[2]))?,
        check_gradients("maxpool1d", seed + 3, shapes(&[&[2, 3, 8]]), |g, x| g.maxpool1d(x[0], 2))?,
        check_gradients("relu", seed + 4, shapes(&[&[4, 5]]), |g, x| g.relu(x[0]))?,
        check_gradients("softmax", seed + 5, shapes(&[&[3, 5]]), |g, x| g.softmax(x[0]))?,
        check_gradients("layer_norm", seed + 6, shapes(&[&[4, 6], &[6], &[6]]), |g, x| g.layer_norm(x[0], x[1], x[2]))?,
        check_gradients("global_avg_pool1d", seed + 7, shapes(&[&[2, 5, 3]]), |g, x| g.global_avg_pool1d(x[0]))?,
        check_gradients("attention", seed + 8, shapes(&[&[2, 4, 8], &[2, 4, 8], &[2, 4, 8]]), |g, x| g.attention(x[0], x[1], x[2], 2))?,
        check_gradients("self_attention", seed + 9, shapes(&[&[1, 5, 8]]), |g, x| g.attention(x[0], x[0], x[0], 4))?,
        check_gradients("add", seed + 10, shapes(&[&[2, 3, 4], &[3, 4]]), |g, x| g.add(x[0], x[1]))?,
        check_gradients("mul", seed + 11, shapes(&[&[2, 3], &[2, 3]]), |g, x| g.mul(x[0], x[1]))?,
        check_gradients("sum", seed + 12, shapes(&[&[3, 2]]), |g, x| g.sum(x[0]))?,
        check_gradients("flatten", seed + 13, shapes(&[&[2, 3, 4]]), |g, x| g.flatten(x[0]))?,
    ];
    reports.push(check_gradients("cross_entropy", seed + 14, shapes(&[&[3, 9]]), |g, x| g.cross_entropy(x[0], &[0, 4, 8]))?);
    Ok(reports)
}
