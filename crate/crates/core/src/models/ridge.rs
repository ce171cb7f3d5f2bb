use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{argmax, ModelError, Result};
use crate::tensor::gemm::{gemm, View, ViewMut};

pub const DEFAULT_LAMBDA_GRID: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];

/// Row-major `rows × cols` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "feature matrix size");
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Per-feature z-scoring. Zero-variance features keep unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &FeatureMatrix) -> Self {
        let n = x.rows.max(1) as f64;
        let mut mean = vec![0.0; x.cols];
        for i in 0..x.rows {
            mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.cols];
        for i in 0..x.rows {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &mut FeatureMatrix) {
        for row in x.values.chunks_mut(x.cols) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

/// One-vs-rest ridge regression on ±1 targets with an unpenalised intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeClassifier {
    /// Row-major `features × classes`.
    pub weights: Vec<f64>,
    pub intercept: Vec<f64>,
    pub lambda: f64,
    pub classes: usize,
}

impl RidgeClassifier {
    pub fn features(&self) -> usize {
        self.weights.len() / self.classes
    }

    pub fn scores(&self, x: &FeatureMatrix) -> Vec<Vec<f64>> {
        assert_eq!(x.cols, self.features(), "feature count");
        let k = self.classes;
        let mut out = vec![0.0; x.rows * k];
        for row in out.chunks_mut(k) {
            row.copy_from_slice(&self.intercept);
        }
        gemm(
            x.rows,
            x.cols,
            k,
            1.0,
            View::row_major(&x.values, 0, x.cols),
            View::row_major(&self.weights, 0, k),
            1.0,
            ViewMut::row_major(&mut out, 0, k),
        );
        out.chunks(k).map(<[f64]>::to_vec).collect()
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Vec<usize> {
        self.scores(x).iter().map(|s| argmax(s)).collect()
    }

    /// `||Y - XW - 1b||² + λ||W||²` with ±1 targets.
    pub fn objective(&self, x: &FeatureMatrix, labels: &[usize]) -> f64 {
        let fit: f64 = self
            .scores(x)
            .iter()
            .zip(labels)
            .map(|(s, &y)| {
                s.iter()
                    .enumerate()
                    .map(|(c, v)| (target(c, y) - v).powi(2))
                    .sum::<f64>()
            })
            .sum();
        fit + self.lambda * self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

fn target(class: usize, label: usize) -> f64 {
    if class == label {
        1.0
    } else {
        -1.0
    }
}

/// Centred design shared by every λ on the grid.
struct Prepared {
    n: usize,
    p: usize,
    classes: usize,
    x_mean: Vec<f64>,
    y_mean: Vec<f64>,
    xc: Vec<f64>,
    yc: DMatrix<f64>,
    /// `Xc Xcᵀ` when n < p, otherwise `Xcᵀ Xc`.
    gram: DMatrix<f64>,
    /// `Xcᵀ Yc`, needed only in the primal form.
    xty: Option<DMatrix<f64>>,
}

impl Prepared {
    fn new(x: &FeatureMatrix, labels: &[usize], classes: usize) -> Result<Self> {
        let (n, p) = (x.rows, x.cols);
        if n < 2 {
            return Err(ModelError::EmptyPartition("ridge training (needs at least 2 rows)"));
        }
        if labels.len() != n || labels.iter().any(|&l| l >= classes) {
            return Err(ModelError::InvalidConfig("ridge labels do not match features".into()));
        }
        let mut x_mean = vec![0.0; p];
        for i in 0..n {
            x_mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
        }
        x_mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut xc = x.values.clone();
        for row in xc.chunks_mut(p) {
            row.iter_mut().zip(&x_mean).for_each(|(v, m)| *v -= m);
        }
        let mut y_mean = vec![0.0; classes];
        for &l in labels {
            for (c, m) in y_mean.iter_mut().enumerate() {
                *m += target(c, l) / n as f64;
            }
        }
        let yc = DMatrix::from_fn(n, classes, |i, c| target(c, labels[i]) - y_mean[c]);
        let a = View::row_major(&xc, 0, p);
        let (gram, xty) = if n < p {
            let mut g = vec![0.0; n * n];
            gemm(n, p, n, 1.0, a, a.transposed(), 0.0, ViewMut::row_major(&mut g, 0, n));
            (DMatrix::from_row_slice(n, n, &g), None)
        } else {
            let mut g = vec![0.0; p * p];
            gemm(p, n, p, 1.0, a.transposed(), a, 0.0, ViewMut::row_major(&mut g, 0, p));
            let ycr: Vec<f64> = (0..n).flat_map(|i| (0..classes).map(move |c| (i, c))).map(|(i, c)| yc[(i, c)]).collect();
            let mut xty = vec![0.0; p * classes];
            gemm(
                p,
                n,
                classes,
                1.0,
                a.transposed(),
                View::row_major(&ycr, 0, classes),
                0.0,
                ViewMut::row_major(&mut xty, 0, classes),
            );
            (DMatrix::from_row_slice(p, p, &g), Some(DMatrix::from_row_slice(p, classes, &xty)))
        };
        Ok(Self {
            n,
            p,
            classes,
            x_mean,
            y_mean,
            xc,
            yc,
            gram,
            xty,
        })
    }

    fn solve(&self, lambda: f64) -> Result<RidgeClassifier> {
        let dim = self.gram.nrows();
        let system = &self.gram + DMatrix::<f64>::identity(dim, dim) * lambda;
        let chol = system.cholesky().ok_or(ModelError::Singular(lambda))?;
        let k = self.classes;
        let weights: Vec<f64> = match &self.xty {
            Some(xty) => {
                let w = chol.solve(xty);
                (0..self.p).flat_map(|j| (0..k).map(move |c| (j, c))).map(|(j, c)| w[(j, c)]).collect()
            }
            None => {
                // Dual form: W = Xcᵀ (Xc Xcᵀ + λI)⁻¹ Yc.
                let alpha = chol.solve(&self.yc);
                let ar: Vec<f64> = (0..self.n).flat_map(|i| (0..k).map(move |c| (i, c))).map(|(i, c)| alpha[(i, c)]).collect();
                let mut w = vec![0.0; self.p * k];
                gemm(
                    self.p,
                    self.n,
                    k,
                    1.0,
                    View::row_major(&self.xc, 0, self.p).transposed(),
                    View::row_major(&ar, 0, k),
                    0.0,
                    ViewMut::row_major(&mut w, 0, k),
                );
                w
            }
        };
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(ModelError::Singular(lambda));
        }
        let intercept = (0..k)
            .map(|c| self.y_mean[c] - (0..self.p).map(|j| self.x_mean[j] * weights[j * k + c]).sum::<f64>())
            .collect();
        Ok(RidgeClassifier {
            weights,
            intercept,
            lambda,
            classes: k,
        })
    }
}

/// Fits at a single λ.
pub fn ridge_fit_lambda(x: &FeatureMatrix, labels: &[usize], classes: usize, lambda: f64) -> Result<RidgeClassifier> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(ModelError::InvalidConfig(format!("ridge lambda must be positive, got {lambda}")));
    }
    Prepared::new(x, labels, classes)?.solve(lambda)
}

/// Fits every λ on the grid and keeps the one with the best validation
/// accuracy; ties go to the earlier grid entry. A one-entry grid needs no
/// validation data.
pub fn ridge_fit(
    x: &FeatureMatrix,
    labels: &[usize],
    validation: Option<(&FeatureMatrix, &[usize])>,
    grid: &[f64],
    classes: usize,
) -> Result<RidgeClassifier> {
    if grid.is_empty() || grid.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(ModelError::InvalidConfig("lambda grid must be nonempty and positive".into()));
    }
    let prepared = Prepared::new(x, labels, classes)?;
    if grid.len() == 1 {
        return prepared.solve(grid[0]);
    }
    let (vx, vy) = match validation {
        Some((vx, vy)) if vx.rows > 0 => (vx, vy),
        _ => return Err(ModelError::EmptyPartition("validation (needed to choose lambda)")),
    };
    let mut best: Option<(usize, RidgeClassifier)> = None;
    for &lambda in grid {
        let model = prepared.solve(lambda)?;
        let correct = model.predict(vx).iter().zip(vy).filter(|(a, b)| a == b).count();
        if best.as_ref().map_or(true, |(c, _)| correct > *c) {
            best = Some((correct, model));
        }
    }
    Ok(best.expect("grid is nonempty").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(n: usize, p: usize, classes: usize, seed: u64) -> (FeatureMatrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = FeatureMatrix::new(n, p, (0..n * p).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let y = (0..n).map(|i| i % classes).collect();
        (x, y)
    }

    /// Steepest descent with exact line search on the same objective, over
    /// weights and intercept jointly. Shares no code with the solver.
    pub(crate) fn descent_oracle(x: &FeatureMatrix, y: &[usize], classes: usize, lambda: f64, iters: usize) -> RidgeClassifier {
        let (n, p) = (x.rows(), x.cols());
        let mut theta = vec![vec![0.0; p + 1]; classes];
        for (c, th) in theta.iter_mut().enumerate() {
            let t: Vec<f64> = y.iter().map(|&l| target(c, l)).collect();
            let pred = |th: &[f64], i: usize| x.row(i).iter().zip(th).map(|(a, b)| a * b).sum::<f64>() + th[p];
            for _ in 0..iters {
                let resid: Vec<f64> = (0..n).map(|i| pred(th, i) - t[i]).collect();
                let mut g = vec![0.0; p + 1];
                for i in 0..n {
                    for j in 0..p {
                        g[j] += 2.0 * resid[i] * x.row(i)[j];
                    }
                    g[p] += 2.0 * resid[i];
                }
                for j in 0..p {
                    g[j] += 2.0 * lambda * th[j];
                }
                let gg: f64 = g.iter().map(|v| v * v).sum();
                if gg < 1e-30 {
                    break;
                }
                let xg: Vec<f64> = (0..n).map(|i| pred(&g, i)).collect();
                let curv = 2.0 * xg.iter().map(|v| v * v).sum::<f64>() + 2.0 * lambda * g[..p].iter().map(|v| v * v).sum::<f64>();
                let step = gg / curv;
                th.iter_mut().zip(&g).for_each(|(a, b)| *a -= step * b);
            }
        }
        RidgeClassifier {
            weights: (0..p).flat_map(|j| theta.iter().map(move |th| th[j])).collect(),
            intercept: theta.iter().map(|th| th[p]).collect(),
            lambda,
            classes,
        }
    }

    #[test]
    fn two_point_closed_form() {
        // x = {1, -1} with labels {0, 1}: centred x'x = 2, x'y = ±2, so w = ±2 / (2 + λ).
        let x = FeatureMatrix::new(2, 1, vec![1.0, -1.0]);
        let m = ridge_fit_lambda(&x, &[0, 1], 2, 1.0).unwrap();
        assert!((m.weights[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.weights[1] + 2.0 / 3.0).abs() < 1e-12);
        assert!(m.intercept.iter().all(|b| b.abs() < 1e-12));
        assert_eq!(m.predict(&x), vec![0, 1]);
    }

    #[test]
    fn huge_lambda_predicts_prior() {
        let (x, _) = random_problem(12, 5, 3, 2);
        let y = vec![2, 2, 2, 2, 2, 1, 1, 1, 0, 0, 1, 2];
        let m = ridge_fit_lambda(&x, &y, 3, 1e12).unwrap();
        assert!(m.weights.iter().all(|w| w.abs() < 1e-9));
        assert!(m.predict(&x).iter().all(|&p| p == 2));
    }

    #[test]
    fn dual_form_matches_oracle() {
        let (wide, y) = random_problem(8, 20, 3, 4);
        let dual = ridge_fit_lambda(&wide, &y, 3, 0.5).unwrap();
        let oracle = descent_oracle(&wide, &y, 3, 0.5, 20_000);
        assert!((dual.objective(&wide, &y) - oracle.objective(&wide, &y)).abs() < 1e-6);
    }

    #[test]
    fn matches_descent_oracle() {
        let (x, y) = random_problem(50, 20, 9, 11);
        let m = ridge_fit_lambda(&x, &y, 9, 1.0).unwrap();
        let oracle = descent_oracle(&x, &y, 9, 1.0, 5_000);
        let (a, b) = (m.objective(&x, &y), oracle.objective(&x, &y));
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        assert!(a <= b + 1e-8);
    }

    #[test]
    fn grid_selection_needs_validation() {
        let (x, y) = random_problem(20, 4, 2, 3);
        assert!(matches!(
            ridge_fit(&x, &y, None, &DEFAULT_LAMBDA_GRID, 2),
            Err(ModelError::EmptyPartition(_))
        ));
        let m = ridge_fit(&x, &y, Some((&x, &y)), &DEFAULT_LAMBDA_GRID, 2).unwrap();
        assert!(DEFAULT_LAMBDA_GRID.contains(&m.lambda));
        assert_eq!(ridge_fit(&x, &y, None, &[5.0], 2).unwrap().lambda, 5.0);
    }

    #[test]
    fn standardizer_zero_mean_unit_std() {
        let mut x = FeatureMatrix::new(3, 2, vec![1.0, 4.0, 2.0, 4.0, 3.0, 4.0]);
        let s = Standardizer::fit(&x);
        assert_eq!(s.std[1], 1.0);
        s.apply(&mut x);
        let col0: Vec<f64> = (0..3).map(|i| x.row(i)[0]).collect();
        assert!(col0.iter().sum::<f64>().abs() < 1e-12);
        assert!((col0.iter().map(|v| v * v).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        assert_eq!(x.row(0)[1], 0.0);
    }
}
