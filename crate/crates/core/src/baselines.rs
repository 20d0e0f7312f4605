//! Comparison methods: LASSO, a MERGE-style coupled linear model, and an MLP
//! that receives the meta-feature matrix as extra constant inputs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::datagen::{Dataset, MetaFeatureMatrix};
use crate::error::{Error, Result};
use crate::models::{Mlp, MlpSpec, Model};
use crate::training::{train_standard, DaprConfig, TrainHistory, WeightReg};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.rank() != 2 || x.cols() != self.weights.len() {
            return Err(Error::invalid(format!("linear model takes {} columns, got {:?}", self.weights.len(), x.shape())));
        }
        Ok((0..x.rows())
            .map(|i| self.intercept + x.row(i).iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }
}

fn check_finite(x: &Tensor, y: &[f64]) -> Result<()> {
    if x.rank() != 2 || x.rows() != y.len() {
        return Err(Error::invalid(format!("design {:?} does not match {} targets", x.shape(), y.len())));
    }
    if x.rows() == 0 {
        return Err(Error::invalid("no samples"));
    }
    if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite values in design or targets"));
    }
    Ok(())
}

pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// `(1/2n)‖y − Xw − b‖² + λ‖w‖₁`
pub fn lasso_objective(x: &Tensor, y: &[f64], w: &[f64], intercept: f64, lambda: f64) -> f64 {
    let n = y.len() as f64;
    let rss: f64 = (0..x.rows())
        .map(|i| {
            let pred = intercept + x.row(i).iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            (y[i] - pred).powi(2)
        })
        .sum();
    rss / (2.0 * n) + lambda * w.iter().map(|v| v.abs()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LassoSolution {
    pub weights: Vec<f64>,
    pub sweeps: usize,
}

/// Cyclic coordinate descent for `(1/2n)‖y − Xw‖² + λ‖w‖₁` (no intercept).
///
/// Stops once a full sweep moves no coordinate by more than `tol`.
pub fn lasso_cd(x: &Tensor, y: &[f64], lambda: f64, tol: f64, max_sweeps: usize) -> Result<LassoSolution> {
    check_finite(x, y)?;
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lasso penalty must be ≥ 0, got {lambda}")));
    }
    let (n, p) = (x.rows(), x.cols());
    let nf = n as f64;
    let cols: Vec<Vec<f64>> = (0..p).map(|j| x.column(j)).collect();
    let scale: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / nf).collect();
    let mut w = vec![0.0; p];
    let mut resid = y.to_vec();
    for sweep in 1..=max_sweeps {
        let mut max_delta: f64 = 0.0;
        for j in 0..p {
            if scale[j] == 0.0 {
                continue;
            }
            let rho = cols[j].iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / nf + scale[j] * w[j];
            let new = soft_threshold(rho, lambda) / scale[j];
            let delta = new - w[j];
            if delta != 0.0 {
                for (r, a) in resid.iter_mut().zip(&cols[j]) {
                    *r -= a * delta;
                }
                w[j] = new;
            }
            max_delta = max_delta.max(delta.abs());
        }
        if max_delta <= tol {
            return Ok(LassoSolution { weights: w, sweeps: sweep });
        }
    }
    Ok(LassoSolution { weights: w, sweeps: max_sweeps })
}

/// Column means and population standard deviations.
pub fn column_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let mut means = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (m, v) in means.iter_mut().zip(x.row(i)) {
            *m += v / n;
        }
    }
    let mut stds = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for ((s, v), m) in stds.iter_mut().zip(x.row(i)).zip(&means) {
            *s += (v - m).powi(2) / n;
        }
    }
    stds.iter_mut().for_each(|s| *s = s.sqrt());
    (means, stds)
}

/// Columns centred and divided by their population std (constant columns
/// become zero).
pub fn standardize(x: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (means, stds) = column_moments(x);
    let mut out = x.clone();
    let c = x.cols();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let j = k % c;
        *v = if stds[j] > 0.0 { (*v - means[j]) / stds[j] } else { 0.0 };
    }
    (out, means, stds)
}

/// LASSO on internally standardised features, with an unpenalised
/// intercept. Weights are returned on the original feature scale.
pub fn lasso_fit(x: &Tensor, y: &[f64], lambda: f64) -> Result<LinearModel> {
    check_finite(x, y)?;
    let (xs, means, stds) = standardize(x);
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - ybar).collect();
    let sol = lasso_cd(&xs, &yc, lambda, 1e-10, 100_000)?;
    let weights: Vec<f64> =
        sol.weights.iter().zip(&stds).map(|(w, s)| if *s > 0.0 { w / s } else { 0.0 }).collect();
    let intercept = ybar - weights.iter().zip(&means).map(|(w, m)| w * m).sum::<f64>();
    Ok(LinearModel { weights, intercept })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeConfig {
    /// Weight λ_m of the coupling term.
    pub coupling: f64,
    /// Ridge weight on β inside the coupling term.
    pub ridge: f64,
    pub max_iter: usize,
    /// Convergence threshold on ‖Δw‖∞ between rounds.
    pub tol: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self { coupling: 1.0, ridge: 1e-3, max_iter: 1000, tol: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeFit {
    pub model: LinearModel,
    pub beta: Vec<f64>,
    /// Joint objective at the start and after every half-step.
    pub objective_trace: Vec<f64>,
    pub rounds: usize,
    pub converged: bool,
}

struct Centered {
    x: DMatrix<f64>,
    y: DVector<f64>,
    x_means: Vec<f64>,
    y_mean: f64,
}

fn center(x: &Tensor, y: &[f64]) -> Centered {
    let (x_means, _) = column_moments(x);
    let y_mean = y.iter().sum::<f64>() / y.len() as f64;
    let xc = DMatrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) - x_means[j]);
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
    Centered { x: xc, y: yc, x_means, y_mean }
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// `(1/2n)‖y − Xw‖² + λ_m(‖w − Mβ‖² + ρ‖β‖²)` on centred data.
pub fn merge_objective(x: &Tensor, y: &[f64], meta: &Tensor, w: &[f64], beta: &[f64], config: &MergeConfig) -> f64 {
    let c = center(x, y);
    objective(&c, &to_dmatrix(meta), &DVector::from_column_slice(w), &DVector::from_column_slice(beta), config)
}

fn objective(c: &Centered, m: &DMatrix<f64>, w: &DVector<f64>, beta: &DVector<f64>, config: &MergeConfig) -> f64 {
    let n = c.y.len() as f64;
    let fit = (&c.y - &c.x * w).norm_squared() / (2.0 * n);
    fit + config.coupling * ((w - m * beta).norm_squared() + config.ridge * beta.norm_squared())
}

/// Alternating exact minimisation of [`merge_objective`] over `w` and `β`.
///
/// The intercept is handled by centring `X` and `y`.
pub fn merge_fit(x: &Tensor, y: &[f64], meta: &MetaFeatureMatrix, config: &MergeConfig) -> Result<MergeFit> {
    check_finite(x, y)?;
    if meta.p() != x.cols() {
        return Err(Error::invalid(format!("{} meta-feature rows for {} features", meta.p(), x.cols())));
    }
    if !(config.coupling >= 0.0) || !(config.ridge >= 0.0) || !(config.tol > 0.0) {
        return Err(Error::invalid("MERGE needs coupling ≥ 0, ridge ≥ 0 and tol > 0"));
    }
    let (p, k) = (x.cols(), meta.k());
    let n = y.len() as f64;
    let c = center(x, y);
    let m = to_dmatrix(&meta.values);

    let a = c.x.transpose() * &c.x / n + DMatrix::identity(p, p) * (2.0 * config.coupling);
    let w_solver = a.cholesky().ok_or_else(|| Error::Singular { context: "MERGE weight update".into() })?;
    let xty = c.x.transpose() * &c.y / n;
    let b = m.transpose() * &m + DMatrix::identity(k, k) * config.ridge;
    let beta_solver = b.cholesky().ok_or_else(|| Error::Singular { context: "MERGE meta-model update".into() })?;

    let mut w = DVector::zeros(p);
    let mut beta = DVector::zeros(k);
    let mut trace = vec![objective(&c, &m, &w, &beta, config)];
    let mut converged = false;
    let mut rounds = 0;
    while rounds < config.max_iter {
        rounds += 1;
        let rhs = &xty + (&m * &beta) * (2.0 * config.coupling);
        let new_w = w_solver.solve(&rhs);
        let delta = (&new_w - &w).amax();
        w = new_w;
        trace.push(objective(&c, &m, &w, &beta, config));
        beta = beta_solver.solve(&(m.transpose() * &w));
        trace.push(objective(&c, &m, &w, &beta, config));
        if delta <= config.tol {
            converged = true;
            break;
        }
    }

    let weights: Vec<f64> = w.iter().copied().collect();
    let intercept = c.y_mean - weights.iter().zip(&c.x_means).map(|(w, m)| w * m).sum::<f64>();
    Ok(MergeFit { model: LinearModel { weights, intercept }, beta: beta.iter().copied().collect(), objective_trace: trace, rounds, converged })
}

/// An MLP trained on `[x; flatten(M)]`.
#[derive(Clone, Debug)]
pub struct NaiveMetaModel {
    pub mlp: Mlp,
    /// Row-major `M`, appended to every input.
    pub appended: Vec<f64>,
    pub history: TrainHistory,
}

impl NaiveMetaModel {
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let width = x.cols() + self.appended.len();
        if width != self.mlp.input_width() {
            return Err(Error::invalid(format!("expected {} raw features", self.mlp.input_width() - self.appended.len())));
        }
        let mut data = Vec::with_capacity(x.rows() * width);
        for i in 0..x.rows() {
            data.extend_from_slice(x.row(i));
            data.extend_from_slice(&self.appended);
        }
        self.mlp.predict(&Tensor::matrix(x.rows(), width, data)?)
    }
}

/// Input width of the naive model: `p + p·k`.
pub fn naive_input_width(p: usize, k: usize) -> usize {
    p + p * k
}

/// The dataset with `flatten(M)` appended to every row.
pub fn naive_augmented(dataset: &Dataset, meta: &MetaFeatureMatrix) -> Result<Dataset> {
    meta.check_aligned(dataset)?;
    let mut names = Vec::with_capacity(meta.p() * meta.k());
    for f in &meta.feature_names {
        for m in &meta.meta_names {
            names.push(format!("{f}:{m}"));
        }
    }
    dataset.with_appended_constants(meta.values.data(), names)
}

/// Trains `hidden`-layer MLP on inputs `[x; flatten(M)]` with the standard
/// trainer. Fails if `p + p·k` exceeds `max_input_width`.
pub fn naive_metafeature_mlp(
    dataset: &Dataset,
    meta: &MetaFeatureMatrix,
    hidden: &[usize],
    activation: crate::models::Activation,
    config: &DaprConfig,
    max_input_width: usize,
) -> Result<NaiveMetaModel> {
    let width = naive_input_width(dataset.p(), meta.k());
    if width > max_input_width {
        return Err(Error::invalid(format!("naive input width {width} exceeds the limit {max_input_width}")));
    }
    let augmented = naive_augmented(dataset, meta)?;
    let spec = MlpSpec::with_hidden(width, hidden, activation);
    let (mlp, history) = train_standard(&augmented, &spec, config, WeightReg::None)?;
    Ok(NaiveMetaModel { mlp, appended: meta.values.data().to_vec(), history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
    }

    #[test]
    fn lasso_kill_condition_gives_exact_zero() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.3, -2.0], vec![2.0, 1.0]]).unwrap();
        let y = [1.0, -0.5, 2.0, 0.1];
        let (xs, _, _) = standardize(&x);
        let ybar = y.iter().sum::<f64>() / 4.0;
        let lambda_max = (0..2)
            .map(|j| xs.column(j).iter().zip(&y).map(|(a, b)| a * (b - ybar)).sum::<f64>().abs() / 4.0)
            .fold(0.0, f64::max);
        let fit = lasso_fit(&x, &y, lambda_max).unwrap();
        assert!(fit.weights.iter().all(|w| *w == 0.0));
        assert_eq!(fit.intercept, ybar);
        let fit = lasso_fit(&x, &y, lambda_max * 0.9).unwrap();
        assert!(fit.weights.iter().any(|w| *w != 0.0));
    }

    #[test]
    fn lasso_orthonormal_design_is_soft_thresholded_ols() {
        // Columns orthogonal with XᵀX / n = I.
        let x = Tensor::from_rows(&[
            vec![1.0, 1.0, 1.0],
            vec![1.0, -1.0, -1.0],
            vec![-1.0, 1.0, -1.0],
            vec![-1.0, -1.0, 1.0],
        ])
        .unwrap();
        let y = [2.0, -1.0, 0.5, 0.25];
        let lambda = 0.3;
        let sol = lasso_cd(&x, &y, lambda, 1e-14, 1000).unwrap();
        for j in 0..3 {
            let ols = x.column(j).iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / 4.0;
            assert!((sol.weights[j] - soft_threshold(ols, lambda)).abs() < 1e-14);
        }
    }

    #[test]
    fn lasso_rejects_non_finite() {
        let x = Tensor::from_rows(&[vec![1.0], vec![f64::NAN]]).unwrap();
        assert!(lasso_fit(&x, &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn naive_width() {
        assert_eq!(naive_input_width(100, 4), 500);
    }
}
