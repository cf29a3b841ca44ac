//! Regression learners for `g` and `h`.
//!
//! [`Regressor`] is the contract the rest of the pipeline relies on: point
//! predictions at arbitrary inputs. The built-in learners are penalized
//! least squares over a [`Dictionary`], tuned by K-fold cross-validation.

pub mod numdiff;
pub mod solver;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::crossfit::make_partition;
use crate::dictionary::{AveragedBasis, Basis, Dictionary, DictionaryFamily, InputKind};
use crate::error::{Error, Result};
use crate::functionals::CounterfactualDraws;
use crate::rng;
use solver::{solve_from, PenalizedQuadraticProblem, Penalty};

/// A trained regression function.
pub trait Regressor: Send + Sync {
    fn input_dim(&self) -> usize;

    fn predict(&self, point: &[f64]) -> f64;

    /// `v ↦ (1/S) Σ_s f(x*_s, v)` for a regression over `(x, v)`.
    fn counterfactual_mean<'a>(
        &'a self,
        draws: &'a CounterfactualDraws,
    ) -> Box<dyn Fn(f64) -> f64 + Send + Sync + 'a> {
        let d = self.input_dim();
        Box::new(move |v| {
            let mut p = vec![0.0; d];
            p[d - 1] = v;
            let mut sum = 0.0;
            for x in draws.points() {
                p[..d - 1].copy_from_slice(x);
                sum += self.predict(&p);
            }
            sum / draws.len() as f64
        })
    }
}

/// Wraps a closure as a regressor.
pub struct FnRegressor<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> FnRegressor<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> Regressor for FnRegressor<F> {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, point: &[f64]) -> f64 {
        (self.f)(point)
    }
}

/// `scale · inner + shift`
pub struct Affine<'a> {
    pub inner: &'a dyn Regressor,
    pub scale: f64,
    pub shift: f64,
}

impl Regressor for Affine<'_> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn predict(&self, point: &[f64]) -> f64 {
        self.scale * self.inner.predict(point) + self.shift
    }

    fn counterfactual_mean<'b>(
        &'b self,
        draws: &'b CounterfactualDraws,
    ) -> Box<dyn Fn(f64) -> f64 + Send + Sync + 'b> {
        let inner = self.inner.counterfactual_mean(draws);
        let (a, b) = (self.scale, self.shift);
        Box::new(move |v| a * inner(v) + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    RidgeDictionary,
    LassoDictionary,
}

impl LearnerKind {
    pub fn penalty(self) -> Penalty {
        match self {
            LearnerKind::RidgeDictionary => Penalty::L2,
            LearnerKind::LassoDictionary => Penalty::L1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoGrid {
    pub points: usize,
    /// Smallest λ as a fraction of the largest.
    pub min_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaGrid {
    Explicit(Vec<f64>),
    Auto(AutoGrid),
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::Auto(AutoGrid {
            points: 20,
            min_ratio: 1e-4,
        })
    }
}

impl LambdaGrid {
    pub fn validate(&self, penalty: Penalty) -> Result<()> {
        match self {
            LambdaGrid::Explicit(v) => {
                if v.is_empty() {
                    return Err(Error::Config("lambda grid is empty".into()));
                }
                for &l in v {
                    let ok = l.is_finite() && (l > 0.0 || (l == 0.0 && penalty == Penalty::L2));
                    if !ok {
                        return Err(Error::Config(format!(
                            "lambda grid entry {l} invalid (positive values only; 0 allowed for ridge)"
                        )));
                    }
                }
            }
            LambdaGrid::Auto(a) => {
                if a.points == 0 || !(a.min_ratio > 0.0 && a.min_ratio < 1.0) {
                    return Err(Error::Config("auto lambda grid needs points >= 1 and 0 < min_ratio < 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Concrete grid in decreasing order; `top` anchors the automatic grid.
    pub fn resolve(&self, top: f64) -> Vec<f64> {
        let mut grid = match self {
            LambdaGrid::Explicit(v) => v.clone(),
            LambdaGrid::Auto(a) => {
                let top = if top > 0.0 && top.is_finite() { top } else { 1e-8 };
                if a.points == 1 {
                    vec![top]
                } else {
                    let step = a.min_ratio.ln() / (a.points - 1) as f64;
                    (0..a.points).map(|k| top * (step * k as f64).exp()).collect()
                }
            }
        };
        grid.sort_by(|a, b| b.total_cmp(a));
        grid.dedup();
        grid
    }
}

fn default_cv_folds() -> usize {
    5
}

fn default_lambda_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    pub dictionary: DictionaryFamily,
    #[serde(default)]
    pub lambda_grid: LambdaGrid,
    #[serde(default = "default_cv_folds")]
    pub cv_folds: usize,
    /// Multiplier applied to the cross-validated λ before the final fit.
    #[serde(default = "default_lambda_scale")]
    pub lambda_scale: f64,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind, dictionary: DictionaryFamily) -> Self {
        Self {
            kind,
            dictionary,
            lambda_grid: LambdaGrid::default(),
            cv_folds: default_cv_folds(),
            lambda_scale: default_lambda_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lambda_grid.validate(self.kind.penalty())?;
        if self.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be at least 2".into()));
        }
        if !(self.lambda_scale > 0.0 && self.lambda_scale.is_finite()) {
            return Err(Error::Config("lambda_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Training rows of a fit, kept for leakage audits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    rows: Vec<usize>,
    digest: u64,
}

impl Fingerprint {
    pub fn new(rows: &[usize]) -> Self {
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        let digest = rng::derive(rows.len() as u64, &rows.iter().map(|&r| r as u64).collect::<Vec<_>>());
        Self { rows, digest }
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn contains(&self, row: usize) -> bool {
        self.rows.binary_search(&row).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedLearner {
    pub kind: LearnerKind,
    pub basis: Basis,
    pub coefficients: Vec<f64>,
    /// λ used for the final coefficients.
    pub lambda: f64,
    /// λ chosen by cross-validation, before `lambda_scale`.
    pub cv_lambda: f64,
    pub dropped: Vec<usize>,
    pub fingerprint: Fingerprint,
    /// Predictions are clipped to this interval when set.
    #[serde(default)]
    pub output_range: Option<[f64; 2]>,
}

impl FittedLearner {
    pub fn with_output_range(mut self, lo: f64, hi: f64) -> Self {
        self.output_range = Some([lo, hi]);
        self
    }

    pub fn active(&self) -> usize {
        self.coefficients.iter().filter(|c| **c != 0.0).count()
    }

    pub fn averaged(&self, draws: &CounterfactualDraws) -> AveragedBasis {
        self.basis.average_over_x(draws)
    }
}

impl Regressor for FittedLearner {
    fn input_dim(&self) -> usize {
        self.basis.input_dim()
    }

    fn predict(&self, point: &[f64]) -> f64 {
        let raw = self.basis.dot(point, &self.coefficients);
        match self.output_range {
            Some([lo, hi]) => raw.clamp(lo, hi),
            None => raw,
        }
    }

    fn counterfactual_mean<'a>(
        &'a self,
        draws: &'a CounterfactualDraws,
    ) -> Box<dyn Fn(f64) -> f64 + Send + Sync + 'a> {
        if self.output_range.is_some() {
            let s = draws.len() as f64;
            return Box::new(move |v| {
                let mut p = Vec::with_capacity(draws.dim() + 1);
                draws
                    .points()
                    .map(|x| {
                        p.clear();
                        p.extend_from_slice(x);
                        p.push(v);
                        self.predict(&p)
                    })
                    .sum::<f64>()
                    / s
            });
        }
        let avg = self.basis.average_over_x(draws);
        Box::new(move |v| avg.dot(v, &self.coefficients))
    }
}

/// Sufficient statistics `(Σ bbᵀ, Σ b·y, Σ y², count)` over a set of rows.
struct Moments {
    gram: DMatrix<f64>,
    linear: DVector<f64>,
    yy: f64,
    n: usize,
}

fn moments(design: &DMatrix<f64>, targets: &[f64], rows: &[usize]) -> Moments {
    let j = design.ncols();
    let sub = DMatrix::from_fn(rows.len(), j, |r, c| design[(rows[r], c)]);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| targets[r]));
    Moments {
        gram: sub.tr_mul(&sub),
        linear: sub.tr_mul(&y),
        yy: y.dot(&y),
        n: rows.len(),
    }
}

fn problem_from(total: &Moments, held: Option<&Moments>, lambda: f64, penalty: Penalty) -> PenalizedQuadraticProblem {
    let (mut g, mut l, mut n) = (total.gram.clone(), total.linear.clone(), total.n);
    if let Some(h) = held {
        g -= &h.gram;
        l -= &h.linear;
        n -= h.n;
    }
    let inv = 1.0 / n as f64;
    g *= inv;
    l *= inv;
    // Subtraction can leave rounding asymmetry.
    let g = (&g + g.transpose()) * 0.5;
    PenalizedQuadraticProblem::with_free_intercept(g, l, lambda, penalty)
}

fn held_out_sse(held: &Moments, rho: &[f64]) -> f64 {
    let r = DVector::from_column_slice(rho);
    held.yy - 2.0 * held.linear.dot(&r) + (&held.gram * &r).dot(&r)
}

fn singular_hint(e: Error) -> Error {
    match e {
        Error::Singular(msg) => Error::Singular(format!("{msg}; use a lambda grid with lambda > 0")),
        other => other,
    }
}

/// Fits penalized least squares of `targets` on the dictionary, choosing λ by
/// minimum held-out squared error. `row_ids` are dataset indices of the
/// training rows and only feed the fingerprint.
pub fn fit_learner(
    spec: &LearnerSpec,
    kind: InputKind,
    inputs: &[Vec<f64>],
    targets: &[f64],
    row_ids: &[usize],
    seed: u64,
) -> Result<FittedLearner> {
    spec.validate()?;
    let n = inputs.len();
    if n < 2 {
        return Err(Error::InvalidData(format!("learner needs at least 2 rows, got {n}")));
    }
    if targets.len() != n || row_ids.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: targets.len(),
        });
    }
    let dim = inputs[0].len();
    if let Some(bad) = inputs.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    if !inputs.iter().flatten().chain(targets).all(|v| v.is_finite()) {
        return Err(Error::InvalidData("non-finite learner input".into()));
    }
    let dict = Dictionary::new(spec.dictionary.clone(), kind, dim)?;
    let basis = Basis::standardized(dict, inputs.iter().map(|p| p.as_slice()));
    let j = basis.len();
    let penalty = spec.kind.penalty();
    let fingerprint = Fingerprint::new(row_ids);

    let first = targets[0];
    if targets.iter().all(|&t| t == first) {
        let mut coefficients = vec![0.0; j];
        coefficients[0] = first;
        return Ok(FittedLearner {
            kind: spec.kind,
            basis,
            coefficients,
            lambda: 0.0,
            cv_lambda: 0.0,
            dropped: Vec::new(),
            fingerprint,
            output_range: None,
        });
    }

    let mut design = DMatrix::zeros(n, j);
    let mut row = vec![0.0; j];
    for (i, p) in inputs.iter().enumerate() {
        basis.eval_into(p, &mut row);
        for c in 0..j {
            design[(i, c)] = row[c];
        }
    }
    let all: Vec<usize> = (0..n).collect();
    let total = moments(&design, targets, &all);
    let full = problem_from(&total, None, 0.0, penalty);
    let top = match penalty {
        Penalty::L1 => full.lambda_max(),
        // Ridge: anchor at ten times the average penalized atom variance.
        Penalty::L2 => {
            let d: Vec<f64> = (1..j).map(|k| full.gram[(k, k)]).collect();
            10.0 * d.iter().sum::<f64>() / d.len().max(1) as f64
        }
    };
    let grid = spec.lambda_grid.resolve(top);

    let cv_lambda = if grid.len() == 1 {
        grid[0]
    } else {
        let k = spec.cv_folds.min(n);
        let part = make_partition(n, k, rng::derive(seed, &[rng::purpose::LEARNER_CV]))?;
        let mut loss = vec![0.0; grid.len()];
        for fold in 0..k {
            let held = moments(&design, targets, &part.fold_rows(fold));
            let mut warm: Option<Vec<f64>> = None;
            for (g, &lambda) in grid.iter().enumerate() {
                let problem = problem_from(&total, Some(&held), lambda, penalty);
                match solve_from(&problem, warm.as_deref(), None) {
                    Ok(sol) => {
                        loss[g] += held_out_sse(&held, &sol.coefficients);
                        warm = Some(sol.coefficients);
                    }
                    Err(Error::Singular(_)) => loss[g] = f64::INFINITY,
                    Err(e) => return Err(e),
                }
            }
        }
        // Ties resolve to the larger λ.
        let best = loss
            .iter()
            .enumerate()
            .fold(0, |b, (g, &l)| if l < loss[b] { g } else { b });
        grid[best]
    };

    let lambda = cv_lambda * spec.lambda_scale;
    let problem = problem_from(&total, None, lambda, penalty);
    let sol = solve_from(&problem, None, None).map_err(singular_hint)?;
    Ok(FittedLearner {
        kind: spec.kind,
        basis,
        coefficients: sol.coefficients,
        lambda,
        cv_lambda,
        dropped: sol.dropped,
        fingerprint,
        output_range: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn xv_inputs(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed, 99, 0);
        (0..n)
            .map(|_| vec![r.sample::<f64, _>(StandardNormal), r.sample::<f64, _>(StandardNormal)])
            .collect()
    }

    fn ids(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    fn spec(kind: LearnerKind, grid: Vec<f64>) -> LearnerSpec {
        LearnerSpec {
            lambda_grid: LambdaGrid::Explicit(grid),
            ..LearnerSpec::new(kind, DictionaryFamily::TensorPolynomial { degree_x: 1, degree_v: 1 })
        }
    }

    #[test]
    fn ridge_without_penalty_interpolates_linear_targets() {
        let x = xv_inputs(40, 1);
        let y: Vec<f64> = x.iter().map(|p| 1.0 + 2.0 * p[0] - p[1] + 0.5 * p[0] * p[1]).collect();
        let fit = fit_learner(&spec(LearnerKind::RidgeDictionary, vec![0.0]), InputKind::OverXv, &x, &y, &ids(40), 0)
            .unwrap();
        for (p, t) in x.iter().zip(&y) {
            assert!((fit.predict(p) - t).abs() < 1e-9);
        }
    }

    #[test]
    fn heavy_ridge_shrinks_to_the_mean() {
        let x = xv_inputs(50, 2);
        let y: Vec<f64> = x.iter().map(|p| 3.0 + p[0] + p[1]).collect();
        let mean = y.iter().sum::<f64>() / 50.0;
        let fit = fit_learner(&spec(LearnerKind::RidgeDictionary, vec![1e12]), InputKind::OverXv, &x, &y, &ids(50), 0)
            .unwrap();
        assert!((fit.predict(&[0.3, -1.0]) - mean).abs() < 1e-6);
    }

    #[test]
    fn lasso_with_large_lambda_zeroes_noise() {
        let x = xv_inputs(60, 3);
        let mut r = rng::stream(3, 98, 0);
        let y: Vec<f64> = (0..60).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let fit = fit_learner(&spec(LearnerKind::LassoDictionary, vec![100.0]), InputKind::OverXv, &x, &y, &ids(60), 0)
            .unwrap();
        assert!(fit.coefficients[1..].iter().all(|&c| c == 0.0));
        // KKT at the solution: every penalized gradient within λ/2.
        let problem = {
            let j = fit.basis.len();
            let mut g = DMatrix::zeros(j, j);
            let mut l = DVector::zeros(j);
            for (p, t) in x.iter().zip(&y) {
                let b = DVector::from_vec(fit.basis.eval(p));
                g += &b * b.transpose() / 60.0;
                l += &b * (*t / 60.0);
            }
            PenalizedQuadraticProblem::with_free_intercept(g, l, 100.0, Penalty::L1)
        };
        assert!(solver::kkt_violation(&problem, &fit.coefficients) < 1e-6);
    }

    #[test]
    fn constant_targets_give_constant_predictor() {
        let x = xv_inputs(10, 4);
        let y = vec![2.5; 10];
        let fit = fit_learner(&LearnerSpec::new(LearnerKind::LassoDictionary, DictionaryFamily::Linear), InputKind::OverXv, &x, &y, &ids(10), 0)
            .unwrap();
        assert_eq!(fit.predict(&[5.0, -3.0]), 2.5);
    }

    #[test]
    fn singular_unpenalized_fit_is_an_error() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        let err = fit_learner(&spec(LearnerKind::RidgeDictionary, vec![0.0]), InputKind::OverXv, &x, &y, &ids(10), 0)
            .unwrap_err();
        assert!(err.to_string().contains("lambda > 0"), "{err}");
    }

    #[test]
    fn cross_validation_prefers_small_lambda_on_clean_signal() {
        let x = xv_inputs(200, 5);
        let mut r = rng::stream(5, 98, 0);
        let y: Vec<f64> = x.iter().map(|p| 2.0 * p[0] + 0.1 * r.sample::<f64, _>(StandardNormal)).collect();
        let s = LearnerSpec::new(LearnerKind::LassoDictionary, DictionaryFamily::Linear);
        let fit = fit_learner(&s, InputKind::OverXv, &x, &y, &ids(200), 7).unwrap();
        let again = fit_learner(&s, InputKind::OverXv, &x, &y, &ids(200), 7).unwrap();
        assert_eq!(fit, again);
        assert!((fit.predict(&[1.0, 0.0]) - fit.predict(&[0.0, 0.0]) - 2.0).abs() < 0.05);
        let scaled = fit_learner(&LearnerSpec { lambda_scale: 10.0, ..s }, InputKind::OverXv, &x, &y, &ids(200), 7).unwrap();
        assert_eq!(scaled.cv_lambda, fit.cv_lambda);
        assert!((scaled.lambda - 10.0 * fit.lambda).abs() < 1e-15);
    }

    #[test]
    fn counterfactual_mean_override_matches_default() {
        let x = xv_inputs(80, 6);
        let y: Vec<f64> = x.iter().map(|p| p[0] * p[0] + p[0] * p[1] + p[1]).collect();
        let s = LearnerSpec {
            lambda_grid: LambdaGrid::Explicit(vec![0.0]),
            ..LearnerSpec::new(LearnerKind::RidgeDictionary, DictionaryFamily::TensorPolynomial { degree_x: 2, degree_v: 1 })
        };
        let fit = fit_learner(&s, InputKind::OverXv, &x, &y, &ids(80), 0).unwrap();
        let draws = CounterfactualDraws::new(vec![vec![0.2], vec![-1.3], vec![0.9]]);
        let fast = fit.counterfactual_mean(&draws);
        let wrapped = FnRegressor::new(2, |p: &[f64]| fit.predict(p));
        let slow = wrapped.counterfactual_mean(&draws);
        for v in [-1.0, 0.0, 0.7] {
            assert!((fast(v) - slow(v)).abs() < 1e-10);
        }
    }

    #[test]
    fn output_range_clips_predictions_and_averages() {
        let x = xv_inputs(80, 7);
        let y: Vec<f64> = x.iter().map(|p| 3.0 * p[0] + p[1]).collect();
        let s = LearnerSpec {
            lambda_grid: LambdaGrid::Explicit(vec![0.0]),
            ..LearnerSpec::new(LearnerKind::RidgeDictionary, DictionaryFamily::TensorPolynomial { degree_x: 1, degree_v: 1 })
        };
        let fit = fit_learner(&s, InputKind::OverXv, &x, &y, &ids(80), 0).unwrap().with_output_range(0.0, 1.0);
        assert_eq!(fit.predict(&[5.0, 0.0]), 1.0);
        assert_eq!(fit.predict(&[-5.0, 0.0]), 0.0);
        assert!((fit.predict(&[0.1, 0.2]) - 0.5).abs() < 1e-9);
        let draws = CounterfactualDraws::new(vec![vec![5.0], vec![-5.0], vec![0.1]]);
        let mean = fit.counterfactual_mean(&draws);
        assert!((mean(0.2) - 1.5 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn grid_validation_and_resolution() {
        assert!(LambdaGrid::Explicit(vec![]).validate(Penalty::L1).is_err());
        assert!(LambdaGrid::Explicit(vec![0.0]).validate(Penalty::L1).is_err());
        assert!(LambdaGrid::Explicit(vec![0.0, 1.0]).validate(Penalty::L2).is_ok());
        let g = LambdaGrid::default().resolve(2.0);
        assert_eq!(g.len(), 20);
        assert!((g[0] - 2.0).abs() < 1e-12 && (g[19] - 2e-4).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn fingerprint_tracks_rows() {
        let f = Fingerprint::new(&[5, 1, 3]);
        assert_eq!(f.rows(), &[1, 3, 5]);
        assert!(f.contains(3) && !f.contains(2));
        assert_eq!(f.digest(), Fingerprint::new(&[1, 3, 5]).digest());
        assert_ne!(f.digest(), Fingerprint::new(&[1, 3, 6]).digest());
    }
}
