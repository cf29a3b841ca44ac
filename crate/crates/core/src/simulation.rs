//! Synthetic designs with closed-form targets and nuisances, and a
//! Monte-Carlo driver.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::data::{Dataset, Mode, Observation};
use crate::dgmm::{estimate, EstimatorConfig, ReferenceNuisances, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::functionals::CounterfactualDraws;
use crate::learners::Regressor;
use crate::riesz::RieszFunction;
use crate::rng;

fn std_normal() -> Normal {
    Normal::standard()
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Which coordinate of `(D, Z)` plays the role of `X` in the CASF design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CasfX {
    /// `X = D`, the endogenous regressor.
    D,
    /// `X = Z₁`, independent of `V`.
    Z1,
}

/// `Y = a + bD + cD² + U`, `D = γᵀZ + V`, `U = ρV + e`, `Z ~ N(0, I_p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CasfDgp {
    pub gamma: Vec<f64>,
    pub sigma_v: f64,
    pub sigma_e: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub rho: f64,
    pub mu_star: f64,
    pub sigma_star: f64,
    pub x: CasfX,
}

impl Default for CasfDgp {
    fn default() -> Self {
        Self {
            gamma: vec![1.0, 1.0, 0.0, 0.0, 0.0],
            sigma_v: 1.0,
            sigma_e: 1.0,
            a: 1.0,
            b: 1.0,
            c: 0.5,
            rho: 0.5,
            mu_star: 0.0,
            sigma_star: 1.0,
            x: CasfX::D,
        }
    }
}

impl CasfDgp {
    pub fn p(&self) -> usize {
        self.gamma.len()
    }

    fn sigma_g2(&self) -> f64 {
        self.gamma.iter().map(|g| g * g).sum()
    }

    /// Variance of `γᵀZ - γ₁Z₁`.
    fn sigma_w2(&self) -> f64 {
        self.sigma_g2() - self.gamma[0].powi(2)
    }

    pub fn theta0(&self) -> f64 {
        let m2 = self.mu_star.powi(2) + self.sigma_star.powi(2);
        match self.x {
            CasfX::D => self.a + self.b * self.mu_star + self.c * m2,
            CasfX::Z1 => {
                let g1 = self.gamma[0];
                self.a
                    + self.b * g1 * self.mu_star
                    + self.c * (g1 * g1 * m2 + self.sigma_v.powi(2) + self.sigma_w2())
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.sigma_v, self.sigma_e, self.a, self.b, self.c, self.rho, self.mu_star, self.sigma_star]
            .iter()
            .chain(&self.gamma)
            .all(|v| v.is_finite());
        if !finite || self.gamma.is_empty() || self.sigma_v <= 0.0 || self.sigma_star <= 0.0 || self.sigma_e < 0.0 {
            return Err(Error::Config("invalid CASF design parameters".into()));
        }
        if self.x == CasfX::D && self.sigma_g2() <= 0.0 {
            return Err(Error::Config("CASF design with X = D needs a non-zero first step".into()));
        }
        Ok(())
    }
}

/// `Y = D·(βX + ε)`, `D = 1[Φ(γᵀZ) ≥ Φ(η)]`, `ε = ρη + e`, `X = Z₁`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionDgp {
    pub gamma: Vec<f64>,
    pub beta: f64,
    pub rho: f64,
    pub sigma_e: f64,
}

impl Default for SelectionDgp {
    fn default() -> Self {
        Self {
            gamma: vec![0.5, 0.5, 0.0, 0.0, 0.0],
            beta: 2.0,
            rho: 0.5,
            sigma_e: 1.0,
        }
    }
}

impl SelectionDgp {
    pub fn p(&self) -> usize {
        self.gamma.len()
    }

    fn tau2(&self) -> f64 {
        self.gamma.iter().map(|g| g * g).sum()
    }

    /// `β·E[Φ(γᵀZ)] = β/2` by symmetry of the index.
    pub fn theta0(&self) -> f64 {
        self.beta / 2.0
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.beta, self.rho, self.sigma_e].iter().chain(&self.gamma).all(|v| v.is_finite());
        if !finite || self.gamma.is_empty() || self.sigma_e < 0.0 {
            return Err(Error::Config("invalid selection design parameters".into()));
        }
        let t2 = self.tau2();
        if t2 <= 0.0 || t2 - self.gamma[0].powi(2) <= 0.0 {
            return Err(Error::Config(
                "selection design needs an excluded instrument (some gamma_k != 0 for k > 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "design", rename_all = "snake_case")]
pub enum Dgp {
    Casf(CasfDgp),
    Selection(SelectionDgp),
}

impl Dgp {
    pub fn theta0(&self) -> f64 {
        match self {
            Dgp::Casf(d) => d.theta0(),
            Dgp::Selection(d) => d.theta0(),
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            Dgp::Casf(_) => Mode::ControlFunction,
            Dgp::Selection(_) => Mode::Selection,
        }
    }
}

/// `z ↦ γᵀz`, optionally passed through `Φ`.
#[derive(Debug, Clone)]
pub struct IndexRegressor {
    pub gamma: Vec<f64>,
    pub probit: bool,
}

impl Regressor for IndexRegressor {
    fn input_dim(&self) -> usize {
        self.gamma.len()
    }

    fn predict(&self, z: &[f64]) -> f64 {
        let t: f64 = self.gamma.iter().zip(z).map(|(g, z)| g * z).sum();
        if self.probit {
            std_normal().cdf(t)
        } else {
            t
        }
    }
}

#[derive(Debug, Clone)]
struct CasfH0 {
    dgp: CasfDgp,
}

impl CasfH0 {
    /// `h₀` written as `c0 + c1·x + c2·x²` at fixed `v`.
    fn coeffs(&self, v: f64) -> [f64; 3] {
        let d = &self.dgp;
        match d.x {
            CasfX::D => [d.a + d.rho * v, d.b, d.c],
            CasfX::Z1 => {
                let g1 = d.gamma[0];
                [
                    d.a + d.b * v + d.c * (v * v + d.sigma_w2()) + d.rho * v,
                    d.b * g1 + 2.0 * d.c * g1 * v,
                    d.c * g1 * g1,
                ]
            }
        }
    }

    fn dv(&self, x: f64, v: f64) -> f64 {
        let d = &self.dgp;
        match d.x {
            CasfX::D => d.rho,
            CasfX::Z1 => d.b + 2.0 * d.c * (d.gamma[0] * x + v) + d.rho,
        }
    }
}

impl Regressor for CasfH0 {
    fn input_dim(&self) -> usize {
        2
    }

    fn predict(&self, p: &[f64]) -> f64 {
        let [c0, c1, c2] = self.coeffs(p[1]);
        c0 + c1 * p[0] + c2 * p[0] * p[0]
    }

    fn counterfactual_mean<'a>(&'a self, draws: &'a CounterfactualDraws) -> Box<dyn Fn(f64) -> f64 + Send + Sync + 'a> {
        let s = draws.len() as f64;
        let m1 = draws.points().map(|x| x[0]).sum::<f64>() / s;
        let m2 = draws.points().map(|x| x[0] * x[0]).sum::<f64>() / s;
        Box::new(move |v| {
            let [c0, c1, c2] = self.coeffs(v);
            c0 + c1 * m1 + c2 * m2
        })
    }
}

/// True density ratio `r₂(x, v) = f*(x) f_V(v) / f_{XV}(x, v)`.
#[derive(Debug, Clone)]
struct CasfR2 {
    dgp: CasfDgp,
}

impl RieszFunction for CasfR2 {
    fn evaluate(&self, p: &[f64]) -> f64 {
        let d = &self.dgp;
        let fstar = normal_pdf(p[0], d.mu_star, d.sigma_star.powi(2));
        match d.x {
            CasfX::D => fstar / normal_pdf(p[0] - p[1], 0.0, d.sigma_g2()),
            CasfX::Z1 => fstar / normal_pdf(p[0], 0.0, 1.0),
        }
    }

    fn evaluate_dv(&self, p: &[f64]) -> f64 {
        match self.dgp.x {
            CasfX::D => -self.evaluate(p) * (p[0] - p[1]) / self.dgp.sigma_g2(),
            CasfX::Z1 => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct SelectionH0 {
    beta: f64,
    rho: f64,
}

impl Regressor for SelectionH0 {
    fn input_dim(&self) -> usize {
        2
    }

    fn predict(&self, p: &[f64]) -> f64 {
        let v = p[1].clamp(1e-12, 1.0 - 1e-12);
        let n = std_normal();
        self.beta * p[0] * p[1] - self.rho * n.pdf(n.inverse_cdf(v))
    }
}

/// `r₂(x, v) = -∂ₓ log f(x | v) = (x - γ₁t/τ²) / (1 - γ₁²/τ²)`, `t = Φ⁻¹(v)`.
#[derive(Debug, Clone)]
struct SelectionR2 {
    gamma1: f64,
    tau2: f64,
}

impl SelectionR2 {
    fn denom(&self) -> f64 {
        1.0 - self.gamma1 * self.gamma1 / self.tau2
    }
}

impl RieszFunction for SelectionR2 {
    fn evaluate(&self, p: &[f64]) -> f64 {
        let t = std_normal().inverse_cdf(p[1].clamp(1e-12, 1.0 - 1e-12));
        (p[0] - self.gamma1 * t / self.tau2) / self.denom()
    }

    fn evaluate_dv(&self, p: &[f64]) -> f64 {
        let n = std_normal();
        let t = n.inverse_cdf(p[1].clamp(1e-12, 1.0 - 1e-12));
        -(self.gamma1 / self.tau2) / self.denom() / n.pdf(t)
    }
}

/// True nuisances of a simulated design.
pub trait OracleBundle: ReferenceNuisances {
    fn h0_dv(&self, point: &[f64]) -> f64;

    /// `E[D₁ coefficient | Z = z]` under indirect-term sign `sign`.
    fn alpha1(&self, z: &[f64], sign: f64) -> f64;
}

pub struct CasfOracle {
    dgp: CasfDgp,
    g0: IndexRegressor,
    h0: CasfH0,
    r2: CasfR2,
}

impl ReferenceNuisances for CasfOracle {
    fn g0(&self) -> &dyn Regressor {
        &self.g0
    }

    fn h0(&self) -> &dyn Regressor {
        &self.h0
    }

    fn alpha2(&self) -> &dyn RieszFunction {
        &self.r2
    }

    fn theta0(&self) -> f64 {
        self.dgp.theta0()
    }
}

impl OracleBundle for CasfOracle {
    fn h0_dv(&self, p: &[f64]) -> f64 {
        self.h0.dv(p[0], p[1])
    }

    /// Closed form for `X = D` only; `NaN` for the `X = Z₁` design.
    fn alpha1(&self, z: &[f64], sign: f64) -> f64 {
        let d = &self.dgp;
        if d.x != CasfX::D {
            return f64::NAN;
        }
        let g = self.g0.predict(z);
        let ratio = normal_pdf(g, d.mu_star, d.sigma_star.powi(2) + d.sigma_v.powi(2)) / normal_pdf(g, 0.0, d.sigma_g2());
        -d.rho - sign * d.rho * ratio
    }
}

pub struct SelectionOracle {
    dgp: SelectionDgp,
    g0: IndexRegressor,
    h0: SelectionH0,
    r2: SelectionR2,
}

impl ReferenceNuisances for SelectionOracle {
    fn g0(&self) -> &dyn Regressor {
        &self.g0
    }

    fn h0(&self) -> &dyn Regressor {
        &self.h0
    }

    fn alpha2(&self) -> &dyn RieszFunction {
        &self.r2
    }

    fn theta0(&self) -> f64 {
        self.dgp.theta0()
    }
}

impl OracleBundle for SelectionOracle {
    fn h0_dv(&self, p: &[f64]) -> f64 {
        let t = std_normal().inverse_cdf(p[1].clamp(1e-12, 1.0 - 1e-12));
        self.dgp.beta * p[0] + self.dgp.rho * t
    }

    fn alpha1(&self, z: &[f64], sign: f64) -> f64 {
        let t: f64 = self.dgp.gamma.iter().zip(z).map(|(g, z)| g * z).sum();
        let v = std_normal().cdf(t);
        let p = [z[0], v];
        let d = &self.dgp;
        d.beta - sign * self.r2.evaluate(&p) * (d.beta * z[0] + d.rho * t)
    }
}

/// Unobserved draws behind a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    /// `V` (CASF) or `η` (selection).
    pub first: Vec<f64>,
    /// Outcome noise `e`.
    pub e: Vec<f64>,
}

pub struct Simulated {
    pub dataset: Dataset,
    pub oracle: Box<dyn OracleBundle>,
    pub latent: Latent,
    pub theta0: f64,
}

/// Draws `n` observations from `dgp`.
pub fn generate(dgp: &Dgp, n: usize, seed: u64) -> Result<Simulated> {
    let mut r = rng::stream(seed, rng::purpose::DGP, 0);
    let mut normal = move || r.sample::<f64, _>(StandardNormal);
    match dgp {
        Dgp::Casf(d) => {
            d.validate()?;
            let mut obs = Vec::with_capacity(n);
            let mut latent = Latent {
                first: Vec::with_capacity(n),
                e: Vec::with_capacity(n),
            };
            for _ in 0..n {
                let z: Vec<f64> = (0..d.p()).map(|_| normal()).collect();
                let v = d.sigma_v * normal();
                let e = d.sigma_e * normal();
                let dd = d.gamma.iter().zip(&z).map(|(g, z)| g * z).sum::<f64>() + v;
                let y = d.a + d.b * dd + d.c * dd * dd + d.rho * v + e;
                obs.push(Observation::new(y, dd, z));
                latent.first.push(v);
                latent.e.push(e);
            }
            let designation = match d.x {
                CasfX::D => vec![0],
                CasfX::Z1 => vec![1],
            };
            let dataset = Dataset::new(obs, designation, Mode::ControlFunction)?;
            let oracle = CasfOracle {
                dgp: d.clone(),
                g0: IndexRegressor {
                    gamma: d.gamma.clone(),
                    probit: false,
                },
                h0: CasfH0 { dgp: d.clone() },
                r2: CasfR2 { dgp: d.clone() },
            };
            Ok(Simulated {
                dataset,
                oracle: Box::new(oracle),
                latent,
                theta0: d.theta0(),
            })
        }
        Dgp::Selection(d) => {
            d.validate()?;
            let mut obs = Vec::with_capacity(n);
            let mut latent = Latent {
                first: Vec::with_capacity(n),
                e: Vec::with_capacity(n),
            };
            let mut selected = 0usize;
            for _ in 0..n {
                let z: Vec<f64> = (0..d.p()).map(|_| normal()).collect();
                let eta = normal();
                let e = d.sigma_e * normal();
                let t: f64 = d.gamma.iter().zip(&z).map(|(g, z)| g * z).sum();
                let sel = if eta <= t { 1.0 } else { 0.0 };
                let y = sel * (d.beta * z[0] + d.rho * eta + e);
                selected += sel as usize;
                obs.push(Observation::new(y, sel, z));
                latent.first.push(eta);
                latent.e.push(e);
            }
            let rate = selected as f64 / n.max(1) as f64;
            if !(0.05..=0.95).contains(&rate) {
                return Err(Error::InvalidData(format!(
                    "degenerate selection: rate {rate:.3} outside [0.05, 0.95]"
                )));
            }
            let dataset = Dataset::new(obs, vec![1], Mode::Selection)?;
            let oracle = SelectionOracle {
                dgp: d.clone(),
                g0: IndexRegressor {
                    gamma: d.gamma.clone(),
                    probit: true,
                },
                h0: SelectionH0 {
                    beta: d.beta,
                    rho: d.rho,
                },
                r2: SelectionR2 {
                    gamma1: d.gamma[0],
                    tau2: d.tau2(),
                },
            };
            Ok(Simulated {
                dataset,
                oracle: Box::new(oracle),
                latent,
                theta0: d.theta0(),
            })
        }
    }
}

/// Root-mean-square of `fit - truth` over `points`.
pub fn oracle_nuisance_error(fit: &dyn RieszFunction, truth: &dyn RieszFunction, points: &[Vec<f64>]) -> f64 {
    let n = points.len().max(1) as f64;
    (points
        .iter()
        .map(|p| (fit.evaluate(p) - truth.evaluate(p)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
}

/// Seeds for replication `rep`: `(data, estimator)`.
pub fn replication_seeds(seed: u64, rep: usize) -> (u64, u64) {
    let base = rng::derive(seed, &[rng::purpose::REPLICATION, rep as u64]);
    (rng::derive(base, &[0]), rng::derive(base, &[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepEstimate {
    pub theta: f64,
    pub theta_plugin: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub data_seed: u64,
    pub estimator_seed: u64,
    pub theta: Option<f64>,
    pub theta_plugin: Option<f64>,
    pub se: Option<f64>,
    pub covered: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub schema_version: u32,
    pub theta0: f64,
    pub n: usize,
    pub replications: usize,
    pub failures: usize,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    /// `None` when no replication has a positive standard error.
    pub coverage: Option<f64>,
    pub mean_se: f64,
    pub plugin_bias: f64,
    pub plugin_sd: f64,
    pub plugin_rmse: f64,
    /// Standard error of `bias`.
    pub bias_mc_se: f64,
    pub plugin_bias_mc_se: f64,
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn moments(values: &[f64], center: f64) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    let var = if values.len() > 1 {
        compensated_sum(values.iter().map(|v| (v - mean).powi(2))) / (n - 1.0)
    } else {
        0.0
    };
    let mse = compensated_sum(values.iter().map(|v| (v - center).powi(2))) / n;
    (mean - center, var.sqrt(), mse.sqrt())
}

/// Runs `estimator` on `replications` independent datasets.
pub fn monte_carlo_with<F>(
    dgp: &Dgp,
    n: usize,
    replications: usize,
    seed: u64,
    estimator: F,
) -> Result<(MonteCarloSummary, Vec<ReplicationRecord>)>
where
    F: Fn(&Simulated, u64) -> Result<RepEstimate> + Sync,
{
    if replications < 2 {
        return Err(Error::Config("Monte Carlo needs at least 2 replications".into()));
    }
    let theta0 = dgp.theta0();
    let records: Vec<ReplicationRecord> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let (data_seed, estimator_seed) = replication_seeds(seed, rep);
            let outcome = generate(dgp, n, data_seed).and_then(|sim| estimator(&sim, estimator_seed));
            match outcome {
                Ok(est) => ReplicationRecord {
                    replication: rep,
                    data_seed,
                    estimator_seed,
                    theta: Some(est.theta),
                    theta_plugin: Some(est.theta_plugin),
                    se: Some(est.se),
                    covered: (est.se > 0.0).then(|| (est.theta - theta0).abs() <= 1.96 * est.se),
                    error: None,
                },
                Err(e) => {
                    log::warn!("replication {rep} failed: {e}");
                    ReplicationRecord {
                        replication: rep,
                        data_seed,
                        estimator_seed,
                        theta: None,
                        theta_plugin: None,
                        se: None,
                        covered: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    if ok.is_empty() {
        return Err(Error::Numerical("every Monte Carlo replication failed".into()));
    }
    let thetas: Vec<f64> = ok.iter().filter_map(|r| r.theta).collect();
    let plugins: Vec<f64> = ok.iter().filter_map(|r| r.theta_plugin).collect();
    let (bias, sd, rmse) = moments(&thetas, theta0);
    let (plugin_bias, plugin_sd, plugin_rmse) = moments(&plugins, theta0);
    let covered: Vec<bool> = ok.iter().filter_map(|r| r.covered).collect();
    let coverage = (!covered.is_empty()).then(|| covered.iter().filter(|c| **c).count() as f64 / covered.len() as f64);
    let mean_se = compensated_sum(ok.iter().filter_map(|r| r.se)) / ok.len() as f64;
    let k = ok.len() as f64;
    let summary = MonteCarloSummary {
        schema_version: SCHEMA_VERSION,
        theta0,
        n,
        replications,
        failures: replications - ok.len(),
        bias,
        sd,
        rmse,
        coverage,
        mean_se,
        plugin_bias,
        plugin_sd,
        plugin_rmse,
        bias_mc_se: sd / k.sqrt(),
        plugin_bias_mc_se: plugin_sd / k.sqrt(),
    };
    Ok((summary, records))
}

/// Monte Carlo of the full debiased estimator.
pub fn monte_carlo(
    dgp: &Dgp,
    n: usize,
    replications: usize,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<(MonteCarloSummary, Vec<ReplicationRecord>)> {
    monte_carlo_with(dgp, n, replications, seed, |sim, s| {
        let report = estimate(&sim.dataset, config, s)?;
        Ok(RepEstimate {
            theta: report.theta,
            theta_plugin: report.theta_plugin,
            se: report.se,
        })
    })
}

pub fn write_replications_csv<W: std::io::Write>(records: &[ReplicationRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["replication", "data_seed", "estimator_seed", "theta", "theta_plugin", "se", "covered", "error"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in records {
        w.write_record([
            r.replication.to_string(),
            r.data_seed.to_string(),
            r.estimator_seed.to_string(),
            opt(r.theta),
            opt(r.theta_plugin),
            opt(r.se),
            r.covered.map(|c| c.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
