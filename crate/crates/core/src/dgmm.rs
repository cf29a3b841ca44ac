//! Debiased moment assembly and point estimation.
//!
//! `θ̂ = (1/n) Σ_ℓ Σ_{i∈I_ℓ} [m(W_i, ĝ_ℓ, ĥ_ℓ, 0) + α̂₁ℓ(z_i)(d_i - ĝ_ℓ(z_i))
//!       + α̂₂ℓ(x_i, v̂_iℓ)(y_i - ĥ_ℓ(x_i, v̂_iℓ))]`
//! with the variance from `ψ̂_iℓ` evaluated at the fold's initial `θ̃_ℓ`.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::crossfit::{make_partition, populate_cache, sample_sd, EstimatorCache, ExclusionKey, FoldPartition, NuisanceSpecs};
use crate::data::Dataset;
use crate::dictionary::{Basis, Dictionary, DictionaryFamily, InputKind};
use crate::error::{Error, Result};
use crate::functionals::{
    default_draw_count, row_views, Ape, Casf, FStar, MomentFunctional, RowView, StepOverrides, Steps,
};
use crate::learners::solver::Penalty;
use crate::learners::{LearnerKind, LearnerSpec, Regressor};
use crate::riesz::{fit_projection, indirect_coeff, CrossFitContext, IndirectSign, RieszFit, RieszFunction, RieszSpec, Which, Zero};
use crate::rng;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalKind {
    Casf,
    Ape,
}

/// Fully resolved estimator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub functional: FunctionalKind,
    pub f_star: FStar,
    /// Number of counterfactual draws; `None` means `min(10·n, 10⁵)`.
    pub draws: Option<usize>,
    pub folds: usize,
    pub depth: usize,
    pub g: LearnerSpec,
    pub h: LearnerSpec,
    pub alpha1: RieszSpec,
    pub alpha2: RieszSpec,
    pub steps: StepOverrides,
    pub indirect_sign: IndirectSign,
    /// Sets `α̂₁ = α̂₂ = 0`, which reduces `θ̂` to the plug-in.
    pub force_zero_alpha: bool,
}

impl EstimatorConfig {
    pub fn casf_default(x_dim: usize) -> Self {
        Self {
            functional: FunctionalKind::Casf,
            f_star: FStar::standard_normal(x_dim),
            draws: None,
            folds: 5,
            depth: 3,
            g: LearnerSpec::new(LearnerKind::LassoDictionary, DictionaryFamily::Linear),
            h: LearnerSpec::new(
                LearnerKind::LassoDictionary,
                DictionaryFamily::TensorPolynomial { degree_x: 2, degree_v: 1 },
            ),
            alpha1: RieszSpec::new(Penalty::L1, DictionaryFamily::Linear),
            alpha2: RieszSpec::new(Penalty::L1, DictionaryFamily::TensorPolynomial { degree_x: 3, degree_v: 3 }),
            steps: StepOverrides::default(),
            indirect_sign: IndirectSign::Literal,
            force_zero_alpha: false,
        }
    }

    pub fn ape_default() -> Self {
        Self {
            functional: FunctionalKind::Ape,
            f_star: FStar::Empirical,
            g: LearnerSpec::new(LearnerKind::LassoDictionary, DictionaryFamily::Polynomial { degree: 3 }),
            h: LearnerSpec::new(
                LearnerKind::LassoDictionary,
                DictionaryFamily::TensorPolynomial { degree_x: 1, degree_v: 3 },
            ),
            alpha2: RieszSpec::new(Penalty::L1, DictionaryFamily::TensorPolynomial { degree_x: 1, degree_v: 3 }),
            ..Self::casf_default(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if !(1..=3).contains(&self.depth) {
            return Err(Error::Config(format!("nesting depth must be 1, 2 or 3, got {}", self.depth)));
        }
        if self.depth >= self.folds {
            return Err(Error::Config(format!(
                "nesting depth {} needs more than {} folds",
                self.depth, self.folds
            )));
        }
        if self.draws == Some(0) {
            return Err(Error::Config("draws must be at least 1".into()));
        }
        self.g.validate()?;
        self.h.validate()?;
        self.alpha1.validate()?;
        self.alpha2.validate()?;
        self.steps.validate()
    }

    pub fn nuisance_specs(&self) -> NuisanceSpecs {
        NuisanceSpecs {
            g: self.g.clone(),
            h: self.h.clone(),
        }
    }

    /// Builds the moment functional, drawing the shared counterfactual sample.
    pub fn build_functional(&self, dataset: &Dataset, seed: u64) -> Result<Box<dyn MomentFunctional>> {
        let f: Box<dyn MomentFunctional> = match self.functional {
            FunctionalKind::Casf => {
                self.f_star.validate(dataset.x_dim())?;
                let observed: Vec<Vec<f64>> = match self.f_star {
                    FStar::Empirical => dataset.observations().iter().map(|o| dataset.extract_x(o)).collect(),
                    _ => Vec::new(),
                };
                let s = self.draws.unwrap_or_else(|| default_draw_count(dataset.len()));
                Box::new(Casf {
                    draws: self.f_star.draw(s, &observed, seed)?,
                })
            }
            FunctionalKind::Ape => Box::new(Ape),
        };
        f.check(dataset)?;
        Ok(f)
    }
}

/// In-sample average of the θ-free part of `m`.
pub fn plugin_theta(functional: &dyn MomentFunctional, h: &dyn Regressor, rows: &[RowView], steps: Steps) -> f64 {
    let lin = functional.linear_parts(h, rows, steps);
    lin.iter().sum::<f64>() / lin.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RieszDiagnostics {
    pub lambda: f64,
    pub cv_lambda: f64,
    pub active: usize,
    pub atoms: usize,
    pub condition: f64,
}

impl RieszDiagnostics {
    fn of(fit: &RieszFit) -> Self {
        Self {
            lambda: fit.lambda,
            cv_lambda: fit.cv_lambda,
            active: fit.active(),
            atoms: fit.coefficients.len(),
            condition: fit.condition,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub n_rows: usize,
    pub theta_tilde: f64,
    pub g_lambda: f64,
    pub h_lambda: f64,
    pub h_cv_lambda: f64,
    pub t_n: f64,
    pub s_n: f64,
    pub phi: f64,
    pub alpha1: Option<RieszDiagnostics>,
    pub alpha2: Option<RieszDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedDiagnostics {
    pub key: String,
    pub alpha2: RieszDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub cache_seconds: f64,
    pub riesz_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    pub functional: String,
    pub n: usize,
    pub theta: f64,
    pub theta_plugin: f64,
    pub phi: f64,
    pub phi_first_step: f64,
    pub phi_second_step: f64,
    pub se: f64,
    pub ci95: [f64; 2],
    /// `ψ̂(θ̂)`, zero up to rounding.
    pub psi_at_theta: f64,
    pub folds: Vec<FoldDiagnostics>,
    pub nested: Vec<NestedDiagnostics>,
    pub config: EstimatorConfig,
    pub seed: u64,
    pub timing: Option<Timing>,
}

/// Everything produced by one estimation run.
pub struct EstimateArtifacts {
    pub report: EstimateReport,
    pub partition: FoldPartition,
    pub cache: EstimatorCache,
    pub alpha1: BTreeMap<ExclusionKey, RieszFit>,
    pub alpha2: BTreeMap<ExclusionKey, RieszFit>,
    pub functional: Box<dyn MomentFunctional>,
}

/// Per-row pieces of the debiased moment.
#[derive(Debug, Clone)]
struct FoldTerms {
    linear: Vec<f64>,
    phi1: Vec<f64>,
    phi2: Vec<f64>,
}

fn fold_terms(
    dataset: &Dataset,
    partition: &FoldPartition,
    cache: &EstimatorCache,
    functional: &dyn MomentFunctional,
    fold: usize,
    alpha1: &dyn RieszFunction,
    alpha2: &dyn RieszFunction,
) -> Result<FoldTerms> {
    let key = ExclusionKey::single(fold);
    let entry = cache.get(&key)?;
    let rows = row_views(dataset, &partition.fold_rows(fold), &entry.g, functional.generated())?;
    let linear = functional.linear_parts(&entry.h, &rows, entry.steps);
    let phi1 = rows
        .iter()
        .map(|r| {
            let z = &dataset.obs(r.row).z;
            alpha1.evaluate(z) * (r.d - entry.g.predict(z))
        })
        .collect();
    let phi2 = rows
        .iter()
        .map(|r| alpha2.evaluate(&r.xv) * (r.y - entry.h.predict(&r.xv)))
        .collect();
    Ok(FoldTerms { linear, phi1, phi2 })
}

/// `φ̂`: the cross-fitted average of both correction terms.
pub fn phi_hat(
    dataset: &Dataset,
    partition: &FoldPartition,
    cache: &EstimatorCache,
    functional: &dyn MomentFunctional,
    alpha1: &BTreeMap<ExclusionKey, RieszFit>,
    alpha2: &BTreeMap<ExclusionKey, RieszFit>,
) -> Result<f64> {
    let mut sum = 0.0;
    for fold in 0..partition.folds() {
        let key = ExclusionKey::single(fold);
        let missing = || Error::Config(format!("missing riesz fit for fold {fold}"));
        let a1 = alpha1.get(&key).ok_or_else(missing)?;
        let a2 = alpha2.get(&key).ok_or_else(missing)?;
        let t = fold_terms(dataset, partition, cache, functional, fold, a1, a2)?;
        sum += t.phi1.iter().zip(&t.phi2).map(|(a, b)| a + b).sum::<f64>();
    }
    Ok(sum / dataset.len() as f64)
}

fn as_riesz(fit: Option<&RieszFit>) -> &dyn RieszFunction {
    match fit {
        Some(f) => f,
        None => &Zero,
    }
}

pub fn estimate(dataset: &Dataset, config: &EstimatorConfig, seed: u64) -> Result<EstimateReport> {
    estimate_detailed(dataset, config, seed).map(|a| a.report)
}

/// Runs the full cross-fitted pipeline and keeps intermediate fits.
pub fn estimate_detailed(dataset: &Dataset, config: &EstimatorConfig, seed: u64) -> Result<EstimateArtifacts> {
    let start = Instant::now();
    config.validate()?;
    if config.folds > dataset.len() {
        return Err(Error::Config(format!(
            "{} folds requested for {} observations",
            config.folds,
            dataset.len()
        )));
    }
    let functional = config.build_functional(dataset, rng::derive(seed, &[rng::purpose::COUNTERFACTUAL]))?;
    let partition = make_partition(dataset.len(), config.folds, seed)?;
    let cache = populate_cache(
        dataset,
        &partition,
        &config.nuisance_specs(),
        functional.as_ref(),
        config.depth,
        config.steps,
        seed,
    )?;
    let cache_seconds = start.elapsed().as_secs_f64();

    let riesz_start = Instant::now();
    let ctx = CrossFitContext {
        dataset,
        partition: &partition,
        cache: &cache,
        functional: functional.as_ref(),
        depth: config.depth,
        seed,
    };
    let (alpha1, alpha2) = if config.force_zero_alpha {
        (BTreeMap::new(), BTreeMap::new())
    } else {
        // Nested α̂₂ fits feed the indirect term of D̂₁.
        let mut alpha2 = ctx.fit_alpha2_tier(1, &config.alpha2)?;
        if config.depth >= 2 {
            alpha2.extend(ctx.fit_alpha2_tier(2, &config.alpha2)?);
        }
        let alpha1 = (0..partition.folds())
            .map(|f| {
                let key = ExclusionKey::single(f);
                ctx.fit_alpha1(&key, &alpha2, &config.alpha1, config.indirect_sign)
                    .map(|fit| (key, fit))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        (alpha1, alpha2)
    };
    let riesz_seconds = riesz_start.elapsed().as_secs_f64();

    let n = dataset.len() as f64;
    let mut folds = Vec::new();
    let mut lin_sum = 0.0;
    let (mut phi1_sum, mut phi2_sum) = (0.0, 0.0);
    let mut psi_sq = 0.0;
    for fold in 0..partition.folds() {
        let key = ExclusionKey::single(fold);
        let entry = cache.get(&key)?;
        let a1 = alpha1.get(&key);
        let a2 = alpha2.get(&key);
        let t = fold_terms(dataset, &partition, &cache, functional.as_ref(), fold, as_riesz(a1), as_riesz(a2))
            .map_err(|e| e.at_stage("moment", &key))?;
        let mut fold_phi = 0.0;
        for i in 0..t.linear.len() {
            let phi = t.phi1[i] + t.phi2[i];
            let psi = t.linear[i] - entry.theta_tilde + phi;
            psi_sq += psi * psi;
            fold_phi += phi;
        }
        lin_sum += t.linear.iter().sum::<f64>();
        phi1_sum += t.phi1.iter().sum::<f64>();
        phi2_sum += t.phi2.iter().sum::<f64>();
        folds.push(FoldDiagnostics {
            fold,
            n_rows: t.linear.len(),
            theta_tilde: entry.theta_tilde,
            g_lambda: entry.g.lambda,
            h_lambda: entry.h.lambda,
            h_cv_lambda: entry.h.cv_lambda,
            t_n: entry.steps.t,
            s_n: entry.steps.s,
            phi: fold_phi / t.linear.len() as f64,
            alpha1: a1.map(RieszDiagnostics::of),
            alpha2: a2.map(RieszDiagnostics::of),
        });
    }
    let theta_plugin = lin_sum / n;
    let phi1 = phi1_sum / n;
    let phi2 = phi2_sum / n;
    let phi = phi1 + phi2;
    let theta = theta_plugin + phi;
    let psi_at_theta = theta_plugin - theta + phi;
    let se = (psi_sq / n / n).sqrt();
    if !(theta.is_finite() && se.is_finite()) {
        return Err(Error::Numerical("non-finite estimate or standard error".into()));
    }
    let nested = alpha2
        .iter()
        .filter(|(k, _)| k.depth() > 1)
        .map(|(k, f)| NestedDiagnostics {
            key: k.to_string(),
            alpha2: RieszDiagnostics::of(f),
        })
        .collect();
    let report = EstimateReport {
        schema_version: SCHEMA_VERSION,
        functional: functional.name().to_string(),
        n: dataset.len(),
        theta,
        theta_plugin,
        phi,
        phi_first_step: phi1,
        phi_second_step: phi2,
        se,
        ci95: [theta - 1.96 * se, theta + 1.96 * se],
        psi_at_theta,
        folds,
        nested,
        config: config.clone(),
        seed,
        timing: Some(Timing {
            cache_seconds,
            riesz_seconds,
            total_seconds: start.elapsed().as_secs_f64(),
        }),
    };
    Ok(EstimateArtifacts {
        report,
        partition,
        cache,
        alpha1,
        alpha2,
        functional,
    })
}

/// Known nuisances for the orthogonality diagnostic.
pub trait ReferenceNuisances: Send + Sync {
    fn g0(&self) -> &dyn Regressor;
    fn h0(&self) -> &dyn Regressor;
    fn alpha2(&self) -> &dyn RieszFunction;
    fn theta0(&self) -> f64;
}

/// `base + τ·delta`
struct Perturbed<'a> {
    base: &'a dyn Regressor,
    delta: &'a dyn Regressor,
    tau: f64,
}

impl Regressor for Perturbed<'_> {
    fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    fn predict(&self, point: &[f64]) -> f64 {
        self.base.predict(point) + self.tau * self.delta.predict(point)
    }

    fn counterfactual_mean<'b>(
        &'b self,
        draws: &'b crate::functionals::CounterfactualDraws,
    ) -> Box<dyn Fn(f64) -> f64 + Send + Sync + 'b> {
        let b = self.base.counterfactual_mean(draws);
        let d = self.delta.counterfactual_mean(draws);
        let tau = self.tau;
        Box::new(move |v| b(v) + tau * d(v))
    }
}

/// One dictionary atom as a regressor.
struct Atom<'a> {
    basis: &'a Basis,
    coef: Vec<f64>,
}

impl<'a> Atom<'a> {
    fn new(basis: &'a Basis, j: usize) -> Self {
        let mut coef = vec![0.0; basis.len()];
        coef[j] = 1.0;
        Self { basis, coef }
    }
}

impl Regressor for Atom<'_> {
    fn input_dim(&self) -> usize {
        self.basis.input_dim()
    }

    fn predict(&self, point: &[f64]) -> f64 {
        self.basis.dot(point, &self.coef)
    }

    fn counterfactual_mean<'b>(
        &'b self,
        draws: &'b crate::functionals::CounterfactualDraws,
    ) -> Box<dyn Fn(f64) -> f64 + Send + Sync + 'b> {
        let avg = self.basis.average_over_x(draws);
        Box::new(move |v| avg.dot(v, &self.coef))
    }
}

fn atom_label(dict: &Dictionary, j: usize, names: &[String]) -> String {
    let parts: Vec<String> = (0..dict.input_dim())
        .filter_map(|c| match dict.exponent(j, c) {
            0 => None,
            1 => Some(names[c].clone()),
            e => Some(format!("{}^{e}", names[c])),
        })
        .collect();
    if parts.is_empty() {
        "1".into()
    } else {
        parts.join("*")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    FirstStep,
    SecondStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionRow {
    pub direction: Direction,
    pub atom: String,
    pub tau: f64,
    /// `None` for second-step rows, which do not depend on the sign.
    pub sign: Option<IndirectSign>,
    pub slope_m: f64,
    pub slope_psi: f64,
    pub se_psi: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub schema_version: u32,
    pub functional: String,
    pub n: usize,
    pub theta0: f64,
    pub rows: Vec<DirectionRow>,
    pub pass_literal: bool,
    pub pass_flipped: bool,
    /// Literal unless only the flipped sign passes.
    pub verdict: IndirectSign,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (mean, sample_sd(values.iter().copied()) / n.sqrt())
}

/// Per-row `(m, ψ)` at `θ₀` for a given first and second step.
#[allow(clippy::too_many_arguments)]
fn moment_rows(
    dataset: &Dataset,
    functional: &dyn MomentFunctional,
    g: &dyn Regressor,
    h: &dyn Regressor,
    alpha1: &dyn RieszFunction,
    alpha2: &dyn RieszFunction,
    theta0: f64,
    steps: Steps,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows: Vec<usize> = (0..dataset.len()).collect();
    let views = row_views(dataset, &rows, g, functional.generated())?;
    let lin = functional.linear_parts(h, &views, steps);
    let mut m = Vec::with_capacity(views.len());
    let mut psi = Vec::with_capacity(views.len());
    for (r, l) in views.iter().zip(lin) {
        let z = &dataset.obs(r.row).z;
        let mi = l - theta0;
        m.push(mi);
        psi.push(mi + alpha1.evaluate(z) * (r.d - g.predict(z)) + alpha2.evaluate(&r.xv) * (r.y - h.predict(&r.xv)));
    }
    Ok((m, psi))
}

/// Finite-difference check that `Ê[ψ]` is locally insensitive to the
/// nuisances at the reference values, for every atom direction of the
/// configured `c_K` and `b_J` dictionaries and every `τ`.
pub fn diagnose_orthogonality(
    dataset: &Dataset,
    config: &EstimatorConfig,
    reference: &dyn ReferenceNuisances,
    taus: &[f64],
    seed: u64,
) -> Result<DiagnosticReport> {
    config.validate()?;
    if taus.is_empty() || taus.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(Error::Config("perturbation scales must be positive".into()));
    }
    let functional = config.build_functional(dataset, rng::derive(seed, &[rng::purpose::COUNTERFACTUAL]))?;
    let functional = functional.as_ref();
    let (g0, h0, a2) = (reference.g0(), reference.h0(), reference.alpha2());
    let theta0 = reference.theta0();
    let all: Vec<usize> = (0..dataset.len()).collect();
    let views = row_views(dataset, &all, g0, functional.generated())?;
    let sigma_v = sample_sd(views.iter().map(|r| r.v()));
    let steps = config.steps.apply(Steps::from_training(sigma_v, dataset.len()));
    let hs = functional.generated().hadamard_sign();
    let z: Vec<Vec<f64>> = dataset.observations().iter().map(|o| o.z.clone()).collect();
    let d11 = functional.d11_coeffs(h0, &views, steps);

    let mut alpha1 = Vec::new();
    for sign in [IndirectSign::Literal, IndirectSign::Flipped] {
        let s = sign.factor(hs);
        let kappa: Vec<f64> = views
            .iter()
            .zip(&d11)
            .map(|(r, direct)| direct + indirect_coeff(r, h0, a2, s, steps.t))
            .collect();
        let fit = fit_projection(
            Which::Alpha1,
            &config.alpha1,
            InputKind::OverZ,
            &z,
            |_, c| {
                let mut lin = c.clone();
                for (mut row, &k) in lin.row_iter_mut().zip(&kappa) {
                    row *= k;
                }
                lin
            },
            rng::derive(seed, &[rng::purpose::RIESZ_CV, sign as u64]),
        )?;
        alpha1.push((sign, fit));
    }

    let n = dataset.len() as f64;
    let mut rows = Vec::new();
    let pass = |slope_m: f64, slope_psi: f64, se: f64| slope_psi.abs() <= 0.1 * slope_m.abs() + 3.0 * se;

    // First step: g₀ + τ·c_k with h₀ and both α fixed.
    let c_dict = Dictionary::new(config.alpha1.dictionary.clone(), InputKind::OverZ, dataset.p())?;
    let c_basis = Basis::standardized(c_dict.clone(), z.iter().map(|p| p.as_slice()));
    let z_names: Vec<String> = (1..=dataset.p()).map(|k| format!("z{k}")).collect();
    for j in 0..c_basis.len() {
        let atom = Atom::new(&c_basis, j);
        for &tau in taus {
            let up = Perturbed { base: g0, delta: &atom, tau };
            let down = Perturbed { base: g0, delta: &atom, tau: -tau };
            for (sign, a1) in &alpha1 {
                let (m_up, psi_up) = moment_rows(dataset, functional, &up, h0, a1, a2, theta0, steps)?;
                let (m_dn, psi_dn) = moment_rows(dataset, functional, &down, h0, a1, a2, theta0, steps)?;
                let slope_m = m_up.iter().zip(&m_dn).map(|(a, b)| (a - b) / (2.0 * tau)).sum::<f64>() / n;
                let per_row: Vec<f64> = psi_up.iter().zip(&psi_dn).map(|(a, b)| (a - b) / (2.0 * tau)).collect();
                let (slope_psi, se) = mean_and_se(&per_row);
                rows.push(DirectionRow {
                    direction: Direction::FirstStep,
                    atom: atom_label(&c_dict, j, &z_names),
                    tau,
                    sign: Some(*sign),
                    slope_m,
                    slope_psi,
                    se_psi: se,
                    pass: pass(slope_m, slope_psi, se),
                });
            }
        }
    }

    // Second step: h₀ + τ·b_j with g₀ fixed. The first-step correction does
    // not involve h, so the literal-sign α₁ serves both signs.
    let b_dict = Dictionary::new(config.alpha2.dictionary.clone(), InputKind::OverXv, dataset.x_dim() + 1)?;
    let b_basis = Basis::standardized(b_dict.clone(), views.iter().map(|r| r.xv.as_slice()));
    let mut xv_names = dataset.x_labels();
    xv_names.push("v".into());
    let a1 = &alpha1[0].1;
    for j in 0..b_basis.len() {
        let atom = Atom::new(&b_basis, j);
        for &tau in taus {
            let up = Perturbed { base: h0, delta: &atom, tau };
            let down = Perturbed { base: h0, delta: &atom, tau: -tau };
            let (m_up, psi_up) = moment_rows(dataset, functional, g0, &up, a1, a2, theta0, steps)?;
            let (m_dn, psi_dn) = moment_rows(dataset, functional, g0, &down, a1, a2, theta0, steps)?;
            let slope_m = m_up.iter().zip(&m_dn).map(|(a, b)| (a - b) / (2.0 * tau)).sum::<f64>() / n;
            let per_row: Vec<f64> = psi_up.iter().zip(&psi_dn).map(|(a, b)| (a - b) / (2.0 * tau)).collect();
            let (slope_psi, se) = mean_and_se(&per_row);
            rows.push(DirectionRow {
                direction: Direction::SecondStep,
                atom: atom_label(&b_dict, j, &xv_names),
                tau,
                sign: None,
                slope_m,
                slope_psi,
                se_psi: se,
                pass: pass(slope_m, slope_psi, se),
            });
        }
    }

    let passes = |sign: IndirectSign| rows.iter().filter(|r| r.sign.is_none() || r.sign == Some(sign)).all(|r| r.pass);
    let pass_literal = passes(IndirectSign::Literal);
    let pass_flipped = passes(IndirectSign::Flipped);
    let verdict = if !pass_literal && pass_flipped {
        IndirectSign::Flipped
    } else {
        IndirectSign::Literal
    };
    Ok(DiagnosticReport {
        schema_version: SCHEMA_VERSION,
        functional: functional.name().to_string(),
        n: dataset.len(),
        theta0,
        rows,
        pass_literal,
        pass_flipped,
        verdict,
    })
}

/// `Ê[ψ]` at `θ₀` with caller-supplied nuisances.
#[allow(clippy::too_many_arguments)]
pub fn mean_moment(
    dataset: &Dataset,
    functional: &dyn MomentFunctional,
    g: &dyn Regressor,
    h: &dyn Regressor,
    alpha1: &dyn RieszFunction,
    alpha2: &dyn RieszFunction,
    theta0: f64,
    steps: Steps,
) -> Result<(f64, f64)> {
    let (m, psi) = moment_rows(dataset, functional, g, h, alpha1, alpha2, theta0, steps)?;
    let n = m.len() as f64;
    Ok((m.iter().sum::<f64>() / n, psi.iter().sum::<f64>() / n))
}
