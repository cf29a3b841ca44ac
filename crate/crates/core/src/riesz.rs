//! Automatic estimation of the influence-function nuisances.
//!
//! `α₂` solves `min -2·D̂₂ᵀρ + ρᵀB̂ρ + λ‖ρ‖_q^q` over `b_J(x, v̂)` and `α₁`
//! solves the same problem with `(Ĉ, D̂₁)` over `c_K(z)`. Each average is
//! cross-fitted: rows of fold `ℓ'` use nuisances that also exclude `ℓ'`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossfit::{make_partition, EstimatorCache, ExclusionKey, FoldPartition};
use crate::data::Dataset;
use crate::dictionary::{Basis, Dictionary, DictionaryFamily, InputKind};
use crate::error::{Error, Result};
use crate::functionals::{row_views, MomentFunctional, RowView};
use crate::learners::numdiff::numerical_dv;
use crate::learners::solver::{solve_from, PenalizedQuadraticProblem, Penalty};
use crate::learners::{LambdaGrid, Regressor};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Alpha1,
    Alpha2,
}

/// Sign convention for the indirect term of `D₁`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndirectSign {
    /// `s = hadamard_sign` of the generated regressor.
    #[default]
    Literal,
    /// `s = -hadamard_sign`; only useful for the diagnostic.
    Flipped,
}

impl IndirectSign {
    pub fn factor(self, hadamard_sign: f64) -> f64 {
        match self {
            IndirectSign::Literal => hadamard_sign,
            IndirectSign::Flipped => -hadamard_sign,
        }
    }
}

fn default_cv_folds() -> usize {
    5
}

fn default_scale() -> f64 {
    1.0
}

fn default_penalty() -> Penalty {
    Penalty::L1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RieszSpec {
    #[serde(default = "default_penalty")]
    pub penalty: Penalty,
    pub dictionary: DictionaryFamily,
    #[serde(default)]
    pub lambda_grid: LambdaGrid,
    #[serde(default = "default_cv_folds")]
    pub cv_folds: usize,
    #[serde(default = "default_scale")]
    pub lambda_scale: f64,
}

impl RieszSpec {
    pub fn new(penalty: Penalty, dictionary: DictionaryFamily) -> Self {
        Self {
            penalty,
            dictionary,
            lambda_grid: LambdaGrid::default(),
            cv_folds: default_cv_folds(),
            lambda_scale: default_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lambda_grid.validate(self.penalty)?;
        if self.cv_folds < 2 {
            return Err(Error::Config("riesz cv_folds must be at least 2".into()));
        }
        if !(self.lambda_scale > 0.0 && self.lambda_scale.is_finite()) {
            return Err(Error::Config("riesz lambda_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Anything usable as `α(x, v)` in the indirect term and the correction.
pub trait RieszFunction: Send + Sync {
    fn evaluate(&self, point: &[f64]) -> f64;

    /// `∂α/∂v` with `v` the last coordinate.
    fn evaluate_dv(&self, point: &[f64]) -> f64;
}

/// The zero function.
#[derive(Debug, Clone, Copy)]
pub struct Zero;

impl RieszFunction for Zero {
    fn evaluate(&self, _point: &[f64]) -> f64 {
        0.0
    }

    fn evaluate_dv(&self, _point: &[f64]) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RieszFit {
    pub which: Which,
    pub basis: Basis,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub cv_lambda: f64,
    pub penalty: Penalty,
    pub dropped: Vec<usize>,
    /// Largest over smallest eigenvalue of the Gram matrix.
    pub condition: f64,
    pub n_rows: usize,
}

impl RieszFit {
    pub fn active(&self) -> usize {
        self.coefficients.iter().filter(|c| **c != 0.0).count()
    }

    pub fn evaluate(&self, point: &[f64]) -> f64 {
        self.basis.dot(point, &self.coefficients)
    }

    pub fn evaluate_dv(&self, point: &[f64]) -> f64 {
        let dv = self.basis.eval_dv(point);
        dv.iter().zip(&self.coefficients).map(|(a, c)| a * c).sum()
    }
}

impl RieszFunction for RieszFit {
    fn evaluate(&self, point: &[f64]) -> f64 {
        RieszFit::evaluate(self, point)
    }

    fn evaluate_dv(&self, point: &[f64]) -> f64 {
        RieszFit::evaluate_dv(self, point)
    }
}

/// A fitted Riesz function used as a plain regressor (for diagnostics).
impl Regressor for RieszFit {
    fn input_dim(&self) -> usize {
        self.basis.input_dim()
    }

    fn predict(&self, point: &[f64]) -> f64 {
        self.evaluate(point)
    }
}

fn design(basis: &Basis, points: &[Vec<f64>]) -> DMatrix<f64> {
    let j = basis.len();
    let mut out = DMatrix::zeros(points.len(), j);
    let mut buf = vec![0.0; j];
    for (i, p) in points.iter().enumerate() {
        basis.eval_into(p, &mut buf);
        out.row_mut(i).copy_from_slice(&buf);
    }
    out
}

/// `(1/n) Σ b(p) b(p)ᵀ`.
pub fn build_b_hat(basis: &Basis, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if points.is_empty() {
        return Err(Error::InvalidData("cannot average a Gram matrix over zero rows".into()));
    }
    let b = design(basis, points);
    Ok(b.tr_mul(&b) / points.len() as f64)
}

/// `(1/n) Σ_i D₂(w_i, b_j)` per atom.
pub fn build_d2_hat(functional: &dyn MomentFunctional, basis: &Basis, rows: &[RowView]) -> DVector<f64> {
    column_means(&functional.d2_rows(basis, rows))
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows().max(1) as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// `(1/n) Σ_i κ_i c(z_i)`.
pub fn build_d1_hat(basis: &Basis, z: &[Vec<f64>], kappa: &[f64]) -> DVector<f64> {
    let mut c = design(basis, z);
    for (mut row, &k) in c.row_iter_mut().zip(kappa) {
        row *= k;
    }
    column_means(&c)
}

/// `s·[∂α₂/∂v·(y - ĥ) - α₂·∂ĥ/∂v]` at `(x, v̂)`, with `∂ĥ/∂v` a forward
/// difference of step `t`.
pub fn indirect_coeff(row: &RowView, h: &dyn Regressor, alpha2: &dyn RieszFunction, sign: f64, t: f64) -> f64 {
    let resid = row.y - h.predict(&row.xv);
    let dh = numerical_dv(h, row.x(), row.v(), t);
    sign * (alpha2.evaluate_dv(&row.xv) * resid - alpha2.evaluate(&row.xv) * dh)
}

fn condition_number(gram: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn problem(gram: DMatrix<f64>, linear: DVector<f64>, lambda: f64, penalty: Penalty) -> PenalizedQuadraticProblem {
    let gram = (&gram + gram.transpose()) * 0.5;
    PenalizedQuadraticProblem::with_free_intercept(gram, linear, lambda, penalty)
}

/// Fits a penalized projection given input points and, per row, the vector
/// whose mean is the linear term. `linear_rows` receives the standardized
/// basis and its design matrix.
pub fn fit_projection<F>(
    which: Which,
    spec: &RieszSpec,
    kind: InputKind,
    points: &[Vec<f64>],
    linear_rows: F,
    seed: u64,
) -> Result<RieszFit>
where
    F: FnOnce(&Basis, &DMatrix<f64>) -> DMatrix<f64>,
{
    spec.validate()?;
    let n = points.len();
    if n < 2 {
        return Err(Error::InvalidData(format!("riesz fit needs at least 2 rows, got {n}")));
    }
    let dict = Dictionary::new(spec.dictionary.clone(), kind, points[0].len())?;
    let basis = Basis::standardized(dict, points.iter().map(|p| p.as_slice()));
    let b = design(&basis, points);
    let lin = linear_rows(&basis, &b);
    let gram_sum = b.tr_mul(&b);
    let lin_sum = DVector::from_iterator(lin.ncols(), lin.column_iter().map(|c| c.sum()));
    let nf = n as f64;
    let full = problem(&gram_sum / nf, &lin_sum / nf, 0.0, spec.penalty);
    let condition = condition_number(&full.gram);
    let top = match spec.penalty {
        Penalty::L1 => full.lambda_max(),
        Penalty::L2 => {
            let j = full.dim();
            10.0 * (1..j).map(|k| full.gram[(k, k)]).sum::<f64>() / (j.max(2) - 1) as f64
        }
    };
    let grid = spec.lambda_grid.resolve(top);

    let cv_lambda = if grid.len() == 1 {
        grid[0]
    } else {
        let k = spec.cv_folds.min(n);
        let part = make_partition(n, k, seed)?;
        let mut loss = vec![0.0; grid.len()];
        for fold in 0..k {
            let rows = part.fold_rows(fold);
            let bk = DMatrix::from_fn(rows.len(), b.ncols(), |r, c| b[(rows[r], c)]);
            let gk = bk.tr_mul(&bk);
            let lk = DVector::from_fn(lin.ncols(), |c, _| rows.iter().map(|&r| lin[(r, c)]).sum());
            let n_train = (n - rows.len()) as f64;
            let mut warm: Option<Vec<f64>> = None;
            for (g, &lambda) in grid.iter().enumerate() {
                let p = problem((&gram_sum - &gk) / n_train, (&lin_sum - &lk) / n_train, lambda, spec.penalty);
                match solve_from(&p, warm.as_deref(), None) {
                    Ok(sol) => {
                        let rho = DVector::from_column_slice(&sol.coefficients);
                        loss[g] += -2.0 * lk.dot(&rho) + (&gk * &rho).dot(&rho);
                        warm = Some(sol.coefficients);
                    }
                    Err(Error::Singular(_)) => loss[g] = f64::INFINITY,
                    Err(e) => return Err(e),
                }
            }
        }
        let best = loss
            .iter()
            .enumerate()
            .fold(0, |b, (g, &l)| if l < loss[b] { g } else { b });
        grid[best]
    };
    let lambda = cv_lambda * spec.lambda_scale;
    let sol = solve_from(&problem(full.gram.clone(), full.linear.clone(), lambda, spec.penalty), None, None)?;
    if !sol.dropped.is_empty() {
        log::warn!("{which:?}: dropped degenerate atoms {:?}", sol.dropped);
    }
    Ok(RieszFit {
        which,
        basis,
        coefficients: sol.coefficients,
        lambda,
        cv_lambda,
        penalty: spec.penalty,
        dropped: sol.dropped,
        condition,
        n_rows: n,
    })
}

/// Shared inputs for the cross-fitted Riesz stages.
pub struct CrossFitContext<'a> {
    pub dataset: &'a Dataset,
    pub partition: &'a FoldPartition,
    pub cache: &'a EstimatorCache,
    pub functional: &'a dyn MomentFunctional,
    /// Deepest populated cache tier.
    pub depth: usize,
    pub seed: u64,
}

/// Rows of one fold seen through the nuisances of `nuisance`.
pub struct FoldBlock {
    pub nuisance: ExclusionKey,
    pub rows: Vec<RowView>,
}

impl CrossFitContext<'_> {
    /// Nuisance key for rows of `fold` inside a fit that excludes `key`.
    pub fn nuisance_key(&self, key: &ExclusionKey, fold: usize) -> Result<ExclusionKey> {
        if key.depth() < self.depth {
            key.with(fold)
        } else {
            Ok(key.clone())
        }
    }

    pub fn blocks(&self, key: &ExclusionKey) -> Result<Vec<FoldBlock>> {
        (0..self.partition.folds())
            .filter(|f| !key.contains(*f))
            .map(|f| {
                let nuisance = self.nuisance_key(key, f)?;
                let entry = self.cache.get(&nuisance)?;
                let rows = row_views(
                    self.dataset,
                    &self.partition.fold_rows(f),
                    &entry.g,
                    self.functional.generated(),
                )?;
                Ok(FoldBlock { nuisance, rows })
            })
            .collect()
    }

    fn key_seed(&self, which: Which, key: &ExclusionKey) -> u64 {
        let tags: Vec<u64> = std::iter::once(rng::purpose::RIESZ_CV)
            .chain(std::iter::once(which as u64))
            .chain(key.folds().iter().map(|&f| f as u64))
            .collect();
        rng::derive(self.seed, &tags)
    }

    /// `α̂₂` for the complement of `key`.
    pub fn fit_alpha2(&self, key: &ExclusionKey, spec: &RieszSpec) -> Result<RieszFit> {
        let blocks = self.blocks(key)?;
        let rows: Vec<RowView> = blocks.into_iter().flat_map(|b| b.rows).collect();
        let points: Vec<Vec<f64>> = rows.iter().map(|r| r.xv.clone()).collect();
        fit_projection(
            Which::Alpha2,
            spec,
            InputKind::OverXv,
            &points,
            |basis, _| self.functional.d2_rows(basis, &rows),
            self.key_seed(Which::Alpha2, key),
        )
        .map_err(|e| e.at_stage("alpha2", key))
    }

    /// `κ_i` and `z_i` over the complement of `key`, where
    /// `κ = D₁₁ coefficient + indirect term`.
    pub fn d1_terms(
        &self,
        key: &ExclusionKey,
        alpha2: &BTreeMap<ExclusionKey, RieszFit>,
        sign: IndirectSign,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let s = sign.factor(self.functional.generated().hadamard_sign());
        let mut z = Vec::new();
        let mut kappa = Vec::new();
        for block in self.blocks(key)? {
            let entry = self.cache.get(&block.nuisance)?;
            let a2 = alpha2
                .get(&block.nuisance)
                .ok_or_else(|| Error::Config(format!("missing alpha2 fit for key {}", block.nuisance)))?;
            let d11 = self.functional.d11_coeffs(&entry.h, &block.rows, entry.steps);
            for (r, direct) in block.rows.iter().zip(d11) {
                kappa.push(direct + indirect_coeff(r, &entry.h, a2, s, entry.steps.t));
                z.push(self.dataset.obs(r.row).z.clone());
            }
        }
        Ok((z, kappa))
    }

    /// `α̂₁` for the complement of `key`.
    pub fn fit_alpha1(
        &self,
        key: &ExclusionKey,
        alpha2: &BTreeMap<ExclusionKey, RieszFit>,
        spec: &RieszSpec,
        sign: IndirectSign,
    ) -> Result<RieszFit> {
        let (z, kappa) = self.d1_terms(key, alpha2, sign)?;
        fit_projection(
            Which::Alpha1,
            spec,
            InputKind::OverZ,
            &z,
            |_, c| {
                let mut lin = c.clone();
                for (mut row, &k) in lin.row_iter_mut().zip(&kappa) {
                    row *= k;
                }
                lin
            },
            self.key_seed(Which::Alpha1, key),
        )
        .map_err(|e| e.at_stage("alpha1", key))
    }

    /// `α̂₂` at every key of the given depth, in parallel.
    pub fn fit_alpha2_tier(&self, depth: usize, spec: &RieszSpec) -> Result<BTreeMap<ExclusionKey, RieszFit>> {
        ExclusionKey::all(self.partition.folds(), depth)
            .into_par_iter()
            .map(|k| self.fit_alpha2(&k, spec).map(|f| (k, f)))
            .collect()
    }
}
