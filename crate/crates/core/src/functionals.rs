//! Moment functionals `m(w, g, h, θ) = D₂(w, h) - θ` for the two built-in
//! targets, together with the direct first-step coefficient `D₁₁`.
//!
//! Both targets are linear in `h`, so the θ-free part of `m` and the
//! second-step derivative `D₂` coincide up to how atoms are differentiated.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GeneratedRegressor, Mode};
use crate::dictionary::Basis;
use crate::error::{Error, Result};
use crate::learners::numdiff::{numerical_dx, numerical_dxdv};
use crate::learners::Regressor;
use crate::rng;

/// Counterfactual `x*` draws stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualDraws {
    dim: usize,
    flat: Vec<f64>,
}

impl CounterfactualDraws {
    pub fn new(points: Vec<Vec<f64>>) -> Self {
        assert!(!points.is_empty(), "at least one counterfactual draw is required");
        let dim = points[0].len();
        assert!(points.iter().all(|p| p.len() == dim), "ragged counterfactual draws");
        Self {
            dim,
            flat: points.into_iter().flatten().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.flat.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.flat.chunks_exact(self.dim)
    }
}

/// Counterfactual distribution `F*` of `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FStar {
    /// Independent normal coordinates.
    Gaussian { mean: Vec<f64>, sd: Vec<f64> },
    PointMass { at: Vec<f64> },
    /// Resample of the observed `X` rows.
    Empirical,
}

impl FStar {
    pub fn standard_normal(dim: usize) -> Self {
        FStar::Gaussian {
            mean: vec![0.0; dim],
            sd: vec![1.0; dim],
        }
    }

    pub fn validate(&self, x_dim: usize) -> Result<()> {
        let check = |len: usize| {
            if len != x_dim {
                Err(Error::Config(format!("F* has dimension {len}, x has dimension {x_dim}")))
            } else {
                Ok(())
            }
        };
        match self {
            FStar::Gaussian { mean, sd } => {
                check(mean.len())?;
                check(sd.len())?;
                if sd.iter().any(|s| !(*s >= 0.0 && s.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
                    return Err(Error::Config("F* Gaussian parameters must be finite with sd >= 0".into()));
                }
            }
            FStar::PointMass { at } => check(at.len())?,
            FStar::Empirical => {}
        }
        Ok(())
    }

    pub fn draw(&self, s: usize, observed_x: &[Vec<f64>], seed: u64) -> Result<CounterfactualDraws> {
        if s == 0 {
            return Err(Error::Config("number of counterfactual draws must be >= 1".into()));
        }
        let mut r = rng::stream(seed, rng::purpose::COUNTERFACTUAL, 0);
        let points = match self {
            FStar::Gaussian { mean, sd } => (0..s)
                .map(|_| {
                    mean.iter()
                        .zip(sd)
                        .map(|(m, sd)| m + sd * r.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect(),
            FStar::PointMass { at } => vec![at.clone(); s],
            FStar::Empirical => {
                if observed_x.is_empty() {
                    return Err(Error::InvalidData("empirical F* needs observed x".into()));
                }
                (0..s)
                    .map(|_| observed_x[r.random_range(0..observed_x.len())].clone())
                    .collect()
            }
        };
        Ok(CounterfactualDraws::new(points))
    }
}

/// Default number of counterfactual draws: `10·n`, capped at `10⁵`.
pub fn default_draw_count(n: usize) -> usize {
    (10 * n).clamp(1, 100_000)
}

/// Finite-difference steps `t_n` (in `v`) and `s_n` (in `x`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Steps {
    pub t: f64,
    pub s: f64,
}

impl Steps {
    /// `σ̂_V · n^(-1/5)` for both steps.
    pub fn from_training(sigma_v: f64, n_train: usize) -> Self {
        let sigma = if sigma_v > 0.0 && sigma_v.is_finite() { sigma_v } else { 1.0 };
        let t = sigma * (n_train.max(1) as f64).powf(-0.2);
        Self { t, s: t }
    }
}

/// Optional fixed values for `t_n` and `s_n`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepOverrides {
    pub t_n: Option<f64>,
    pub s_n: Option<f64>,
}

impl StepOverrides {
    pub fn apply(self, steps: Steps) -> Steps {
        Steps {
            t: self.t_n.unwrap_or(steps.t),
            s: self.s_n.unwrap_or(steps.s),
        }
    }

    pub fn validate(self) -> Result<()> {
        for v in [self.t_n, self.s_n].into_iter().flatten() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("finite-difference steps must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// One observation seen through a first-step fit: `(x, v̂)` plus `y` and `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowView {
    pub row: usize,
    pub y: f64,
    pub d: f64,
    /// `x` followed by `v̂`.
    pub xv: Vec<f64>,
}

impl RowView {
    pub fn x(&self) -> &[f64] {
        &self.xv[..self.xv.len() - 1]
    }

    pub fn v(&self) -> f64 {
        self.xv[self.xv.len() - 1]
    }
}

pub fn row_views(
    dataset: &Dataset,
    rows: &[usize],
    g: &dyn Regressor,
    generated: GeneratedRegressor,
) -> Result<Vec<RowView>> {
    if g.input_dim() != dataset.p() {
        return Err(Error::DimensionMismatch {
            expected: g.input_dim(),
            got: dataset.p(),
        });
    }
    let k = dataset.x_dim();
    Ok(rows
        .iter()
        .map(|&i| {
            let obs = dataset.obs(i);
            let v = generated.apply(obs.d, g.predict(&obs.z));
            let mut xv = vec![0.0; k + 1];
            dataset.fill_xv(obs, v, &mut xv);
            RowView {
                row: i,
                y: obs.y,
                d: obs.d,
                xv,
            }
        })
        .collect())
}

/// The contract a target parameter exposes to the estimator.
pub trait MomentFunctional: Send + Sync {
    fn name(&self) -> &'static str;

    fn mode(&self) -> Mode;

    fn generated(&self) -> GeneratedRegressor {
        GeneratedRegressor::for_mode(self.mode())
    }

    fn check(&self, dataset: &Dataset) -> Result<()>;

    /// `m(w, g, h, θ) + θ` per row.
    fn linear_parts(&self, h: &dyn Regressor, rows: &[RowView], steps: Steps) -> Vec<f64>;

    /// `D₂(w_i, b_j)` for every row `i` and atom `j`.
    fn d2_rows(&self, basis: &Basis, rows: &[RowView]) -> DMatrix<f64>;

    /// Scalar multiplying `g(z)` in the direct first-step term `D₁₁`.
    fn d11_coeffs(&self, h: &dyn Regressor, rows: &[RowView], steps: Steps) -> Vec<f64>;
}

/// Counterfactual average structural function `∫ h(x*, v) dF*(x*)`.
#[derive(Debug, Clone)]
pub struct Casf {
    pub draws: CounterfactualDraws,
}

impl MomentFunctional for Casf {
    fn name(&self) -> &'static str {
        "casf"
    }

    fn mode(&self) -> Mode {
        Mode::ControlFunction
    }

    fn check(&self, dataset: &Dataset) -> Result<()> {
        if dataset.mode() != Mode::ControlFunction {
            return Err(Error::Config("casf requires control_function mode".into()));
        }
        if self.draws.dim() != dataset.x_dim() {
            return Err(Error::DimensionMismatch {
                expected: dataset.x_dim(),
                got: self.draws.dim(),
            });
        }
        Ok(())
    }

    fn linear_parts(&self, h: &dyn Regressor, rows: &[RowView], _steps: Steps) -> Vec<f64> {
        let hbar = h.counterfactual_mean(&self.draws);
        rows.iter().map(|r| hbar(r.v())).collect()
    }

    fn d2_rows(&self, basis: &Basis, rows: &[RowView]) -> DMatrix<f64> {
        let avg = basis.average_over_x(&self.draws);
        let mut out = DMatrix::zeros(rows.len(), basis.len());
        let mut buf = vec![0.0; basis.len()];
        for (i, r) in rows.iter().enumerate() {
            avg.eval_into(r.v(), &mut buf);
            out.row_mut(i).copy_from_slice(&buf);
        }
        out
    }

    fn d11_coeffs(&self, h: &dyn Regressor, rows: &[RowView], steps: Steps) -> Vec<f64> {
        // Averaging forward differences over draws equals differencing the average.
        let hbar = h.counterfactual_mean(&self.draws);
        rows.iter()
            .map(|r| -(hbar(r.v() + steps.t) - hbar(r.v())) / steps.t)
            .collect()
    }
}

/// Average partial effect `E[∂h(x, g(z))/∂x]` for scalar `x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ape;

impl MomentFunctional for Ape {
    fn name(&self) -> &'static str {
        "ape"
    }

    fn mode(&self) -> Mode {
        Mode::Selection
    }

    fn check(&self, dataset: &Dataset) -> Result<()> {
        if dataset.mode() != Mode::Selection {
            return Err(Error::Config("ape requires selection mode".into()));
        }
        if dataset.x_dim() != 1 {
            return Err(Error::Config(format!("ape needs a scalar x, got dimension {}", dataset.x_dim())));
        }
        Ok(())
    }

    fn linear_parts(&self, h: &dyn Regressor, rows: &[RowView], steps: Steps) -> Vec<f64> {
        rows.iter()
            .map(|r| numerical_dx(h, r.xv[0], r.v(), steps.s))
            .collect()
    }

    fn d2_rows(&self, basis: &Basis, rows: &[RowView]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(rows.len(), basis.len());
        let mut buf = vec![0.0; basis.len()];
        for (i, r) in rows.iter().enumerate() {
            basis.eval_partial_into(&r.xv, 0, &mut buf);
            out.row_mut(i).copy_from_slice(&buf);
        }
        out
    }

    fn d11_coeffs(&self, h: &dyn Regressor, rows: &[RowView], steps: Steps) -> Vec<f64> {
        rows.iter()
            .map(|r| numerical_dxdv(h, r.xv[0], r.v(), steps.s, steps.t))
            .collect()
    }
}

/// Single-row forms of the functional operations.
pub fn casf_m(row: &RowView, h: &dyn Regressor, theta: f64, draws: &CounterfactualDraws) -> f64 {
    h.counterfactual_mean(draws)(row.v()) - theta
}

pub fn casf_d2_apply(row: &RowView, atom: &dyn Regressor, draws: &CounterfactualDraws) -> f64 {
    atom.counterfactual_mean(draws)(row.v())
}

pub fn casf_d11_coeff(row: &RowView, h: &dyn Regressor, draws: &CounterfactualDraws, t: f64) -> f64 {
    let hbar = h.counterfactual_mean(draws);
    -(hbar(row.v() + t) - hbar(row.v())) / t
}

pub fn ape_m(row: &RowView, h: &dyn Regressor, theta: f64, s: f64) -> f64 {
    numerical_dx(h, row.xv[0], row.v(), s) - theta
}

/// Analytic `∂b_j/∂x` at `(x, v̂)`.
pub fn ape_d2_apply(row: &RowView, basis: &Basis, j: usize) -> f64 {
    let mut buf = vec![0.0; basis.len()];
    basis.eval_partial_into(&row.xv, 0, &mut buf);
    buf[j]
}

pub fn ape_d11_coeff(row: &RowView, h: &dyn Regressor, s: f64, t: f64) -> f64 {
    numerical_dxdv(h, row.xv[0], row.v(), s, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{Dictionary, DictionaryFamily, InputKind};
    use crate::learners::FnRegressor;

    fn row(x: f64, v: f64) -> RowView {
        RowView {
            row: 0,
            y: 0.0,
            d: 0.0,
            xv: vec![x, v],
        }
    }

    fn gaussian(mean: f64, sd: f64, s: usize) -> CounterfactualDraws {
        FStar::Gaussian {
            mean: vec![mean],
            sd: vec![sd],
        }
        .draw(s, &[], 11)
        .unwrap()
    }

    #[test]
    fn casf_moment_examples() {
        let r = row(0.3, 0.8);
        let point = CounterfactualDraws::new(vec![vec![2.0]]);
        let c = FnRegressor::new(2, |_| 4.0);
        assert_eq!(casf_m(&r, &c, 1.5, &point), 2.5);
        let ident = FnRegressor::new(2, |p| p[0]);
        assert_eq!(casf_m(&r, &ident, 0.5, &point), 1.5);
        let s = 100_000;
        let draws = gaussian(0.0, 1.0, s);
        let sq = FnRegressor::new(2, |p| p[0] * p[0]);
        let got = casf_m(&r, &sq, 0.0, &draws);
        assert!((got - 1.0).abs() < 3.0 * 2f64.sqrt() / (s as f64).sqrt());
    }

    #[test]
    fn casf_d2_examples() {
        let r = row(0.3, -1.7);
        let draws = gaussian(0.7, 2.0, 100_000);
        assert!((casf_d2_apply(&r, &FnRegressor::new(2, |p| p[1]), &draws) + 1.7).abs() < 1e-9);
        assert!((casf_d2_apply(&r, &FnRegressor::new(2, |_| 1.0), &draws) - 1.0).abs() < 1e-9);
        let mean_x = casf_d2_apply(&r, &FnRegressor::new(2, |p| p[0]), &draws);
        assert!((mean_x - 0.7).abs() < 3.0 * 2.0 / (1e5f64).sqrt());
    }

    #[test]
    fn casf_d11_examples() {
        let r = row(0.3, 0.4);
        let draws = gaussian(1.5, 0.5, 50_000);
        let additive = FnRegressor::new(2, |p| p[0] * p[0] + 3.0 * p[1]);
        assert!((casf_d11_coeff(&r, &additive, &draws, 0.1) + 3.0).abs() < 1e-9);
        let v_free = FnRegressor::new(2, |p| p[0].sin());
        assert_eq!(casf_d11_coeff(&r, &v_free, &draws, 0.1), 0.0);
        let xv = FnRegressor::new(2, |p| p[0] * p[1]);
        let got = casf_d11_coeff(&r, &xv, &draws, 0.1);
        assert!((got + 1.5).abs() < 3.0 * 0.5 / (5e4f64).sqrt() + 1e-9);
    }

    #[test]
    fn ape_examples() {
        let r = row(1.0, 0.6);
        let bilinear = FnRegressor::new(2, |p| 2.0 * p[0] * p[1]);
        assert!((ape_m(&r, &bilinear, 0.3, 0.1) - (1.2 - 0.3)).abs() < 1e-12);
        let x_free = FnRegressor::new(2, |p| p[1] * p[1]);
        assert_eq!(ape_m(&r, &x_free, 0.3, 0.1), -0.3);
        let sq = FnRegressor::new(2, |p| p[0] * p[0]);
        assert!((ape_m(&r, &sq, 0.0, 0.1) - 2.1).abs() < 1e-12);

        assert!((ape_d11_coeff(&r, &bilinear, 0.1, 0.1) - 2.0).abs() < 1e-12);
        let additive = FnRegressor::new(2, |p| p[0].exp() + p[1].cos());
        assert!(ape_d11_coeff(&r, &additive, 0.1, 0.1).abs() < 1e-12);
        let x2v = FnRegressor::new(2, |p| p[0] * p[0] * p[1]);
        assert!((ape_d11_coeff(&r, &x2v, 0.1, 0.1) - 2.1).abs() < 1e-12);
    }

    #[test]
    fn ape_d2_is_analytic_x_derivative() {
        let dict = Dictionary::new(DictionaryFamily::TensorPolynomial { degree_x: 2, degree_v: 1 }, InputKind::OverXv, 2)
            .unwrap();
        let basis = Basis::identity(dict);
        // Atom order: 1, x, x², v, xv, x²v.
        let r = row(2.0, 3.0);
        assert_eq!(ape_d2_apply(&r, &basis, 0), 0.0);
        assert_eq!(ape_d2_apply(&r, &basis, 4), 3.0);
        assert_eq!(ape_d2_apply(&r, &basis, 2), 4.0);
    }

    #[test]
    fn casf_d2_rows_reproduce_linear_part() {
        let dict = Dictionary::new(DictionaryFamily::TensorPolynomial { degree_x: 2, degree_v: 2 }, InputKind::OverXv, 2)
            .unwrap();
        let basis = Basis::identity(dict);
        let coef = [0.5, -1.0, 0.25, 2.0, 0.1, -0.3, 0.0, 0.7, 0.2];
        let h = FnRegressor::new(2, |p: &[f64]| basis.dot(p, &coef));
        let f = Casf { draws: gaussian(0.2, 1.1, 500) };
        let rows: Vec<RowView> = (0..7).map(|i| row(0.0, i as f64 * 0.3 - 1.0)).collect();
        let steps = Steps { t: 0.1, s: 0.1 };
        let lin = f.linear_parts(&h, &rows, steps);
        let d2 = f.d2_rows(&basis, &rows);
        for i in 0..rows.len() {
            let via_atoms: f64 = (0..basis.len()).map(|j| d2[(i, j)] * coef[j]).sum();
            assert!((lin[i] - via_atoms).abs() < 1e-10);
        }
    }

    #[test]
    fn empirical_casf_of_v_free_h_is_sample_mean() {
        let xs: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64 * 0.37).sin()]).collect();
        let h = FnRegressor::new(2, |p| p[0] * 3.0 + 1.0);
        let draws = CounterfactualDraws::new(xs.clone());
        let got = casf_m(&row(0.0, 0.2), &h, 0.0, &draws);
        let mean = xs.iter().map(|x| 3.0 * x[0] + 1.0).sum::<f64>() / 50.0;
        assert!((got - mean).abs() < 1e-12);
        let resampled = FStar::Empirical.draw(10, &xs, 1).unwrap();
        assert!(resampled.points().all(|p| xs.iter().any(|x| x[0] == p[0])));
    }

    #[test]
    fn affine_in_theta() {
        let r = row(0.4, -0.2);
        let h = FnRegressor::new(2, |p| p[0] * p[1] + p[0].powi(3));
        let draws = gaussian(0.0, 1.0, 100);
        for theta in [-2.0, 0.0, 3.5] {
            assert!((casf_m(&r, &h, theta, &draws) - casf_m(&r, &h, 0.0, &draws) + theta).abs() < 1e-12);
            assert!((ape_m(&r, &h, theta, 0.1) - ape_m(&r, &h, 0.0, 0.1) + theta).abs() < 1e-12);
        }
    }

    #[test]
    fn draw_counts_and_steps() {
        assert_eq!(default_draw_count(100), 1000);
        assert_eq!(default_draw_count(50_000), 100_000);
        let s = Steps::from_training(2.0, 32);
        assert!((s.t - 1.0).abs() < 1e-12 && s.s == s.t);
        assert_eq!(gaussian(0.0, 1.0, 5), gaussian(0.0, 1.0, 5));
    }
}
