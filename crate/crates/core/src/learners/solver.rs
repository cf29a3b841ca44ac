//! Minimizer of `-2·lᵀρ + ρᵀGρ + λ Σ_{j penalized} |ρ_j|^q` for `q ∈ {1, 2}`.
//!
//! This single problem form covers penalized least squares (with `G = BᵀB/n`,
//! `l = Bᵀy/n`) and both automatic Riesz-representer objectives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CD_TOLERANCE: f64 = 1e-8;
/// Active-set sweeps between attempts at an exact feature-sign finish.
const POLISH_EVERY: usize = 50;

pub const CD_MAX_SWEEPS: usize = 10_000;

/// Diagonal entries at or below this are treated as degenerate atoms.
const DEGENERATE_DIAGONAL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    /// `q = 1` (Lasso)
    L1,
    /// `q = 2` (Ridge)
    L2,
}

impl Penalty {
    pub fn q(self) -> u32 {
        match self {
            Penalty::L1 => 1,
            Penalty::L2 => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PenalizedQuadraticProblem {
    pub gram: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub lambda: f64,
    pub penalty: Penalty,
    pub penalized: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct QuadraticSolution {
    pub coefficients: Vec<f64>,
    /// Atoms with a zero diagonal, fixed at zero.
    pub dropped: Vec<usize>,
    pub sweeps: usize,
    pub converged: bool,
}

impl PenalizedQuadraticProblem {
    /// Problem with every atom except atom 0 (the constant) penalized.
    pub fn with_free_intercept(
        gram: DMatrix<f64>,
        linear: DVector<f64>,
        lambda: f64,
        penalty: Penalty,
    ) -> Self {
        let j = linear.len();
        let penalized = (0..j).map(|k| k != 0).collect();
        Self {
            gram,
            linear,
            lambda,
            penalty,
            penalized,
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.dim();
        if self.gram.nrows() != j || self.gram.ncols() != j || self.penalized.len() != j {
            return Err(Error::DimensionMismatch {
                expected: j,
                got: self.gram.nrows(),
            });
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        for r in 0..j {
            if self.gram[(r, r)] < 0.0 {
                return Err(Error::Numerical(format!("negative gram diagonal at {r}")));
            }
            for c in 0..r {
                let (a, b) = (self.gram[(r, c)], self.gram[(c, r)]);
                if (a - b).abs() > 1e-9 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::Numerical("gram matrix is not symmetric".into()));
                }
            }
        }
        if !self.linear.iter().chain(self.gram.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite entries in quadratic problem".into()));
        }
        Ok(())
    }

    pub fn objective(&self, rho: &[f64]) -> f64 {
        let r = DVector::from_column_slice(rho);
        let quad = (&self.gram * &r).dot(&r);
        let pen: f64 = rho
            .iter()
            .zip(&self.penalized)
            .filter(|(_, &p)| p)
            .map(|(v, _)| match self.penalty {
                Penalty::L1 => v.abs(),
                Penalty::L2 => v * v,
            })
            .sum();
        -2.0 * self.linear.dot(&r) + quad + self.lambda * pen
    }

    fn degenerate(&self) -> Vec<usize> {
        (0..self.dim())
            .filter(|&j| self.gram[(j, j)] <= DEGENERATE_DIAGONAL)
            .collect()
    }

    /// Smallest `λ` at which every penalized L1 coefficient is zero.
    pub fn lambda_max(&self) -> f64 {
        let dropped = self.degenerate();
        let free: Vec<usize> = (0..self.dim())
            .filter(|j| !self.penalized[*j] && !dropped.contains(j))
            .collect();
        let mut rho_free = vec![0.0; free.len()];
        if !free.is_empty() {
            let g = DMatrix::from_fn(free.len(), free.len(), |r, c| self.gram[(free[r], free[c])]);
            let l = DVector::from_fn(free.len(), |r, _| self.linear[free[r]]);
            if let Some(sol) = g.lu().solve(&l) {
                rho_free = sol.iter().copied().collect();
            }
        }
        (0..self.dim())
            .filter(|j| self.penalized[*j] && !dropped.contains(j))
            .map(|j| {
                let fitted: f64 = free.iter().zip(&rho_free).map(|(&k, r)| self.gram[(j, k)] * r).sum();
                2.0 * (self.linear[j] - fitted).abs()
            })
            .fold(0.0, f64::max)
    }
}

pub fn solve_penalized_quadratic(problem: &PenalizedQuadraticProblem) -> Result<QuadraticSolution> {
    solve_from(problem, None, None)
}

/// Same as [`solve_penalized_quadratic`] with the objective recorded after every sweep.
pub fn solve_with_trace(problem: &PenalizedQuadraticProblem) -> Result<(QuadraticSolution, Vec<f64>)> {
    let mut trace = Vec::new();
    let sol = solve_from(problem, None, Some(&mut trace))?;
    Ok((sol, trace))
}

/// Solves starting from `start` (used for warm starts along a λ path).
pub fn solve_from(
    problem: &PenalizedQuadraticProblem,
    start: Option<&[f64]>,
    trace: Option<&mut Vec<f64>>,
) -> Result<QuadraticSolution> {
    problem.validate()?;
    let dropped = problem.degenerate();
    if !dropped.is_empty() {
        log::debug!("dropping degenerate atoms {dropped:?}");
    }
    match problem.penalty {
        Penalty::L2 => solve_ridge(problem, dropped, trace),
        Penalty::L1 => Ok(solve_lasso(problem, dropped, start, trace)),
    }
}

fn solve_ridge(
    problem: &PenalizedQuadraticProblem,
    dropped: Vec<usize>,
    trace: Option<&mut Vec<f64>>,
) -> Result<QuadraticSolution> {
    let keep: Vec<usize> = (0..problem.dim()).filter(|j| !dropped.contains(j)).collect();
    let k = keep.len();
    let a = DMatrix::from_fn(k, k, |r, c| {
        let mut v = problem.gram[(keep[r], keep[c])];
        if r == c && problem.penalized[keep[r]] {
            v += problem.lambda;
        }
        v
    });
    let b = DVector::from_fn(k, |r, _| problem.linear[keep[r]]);
    let sol = match a.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => a
            .lu()
            .solve(&b)
            .filter(|x| x.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Singular(format!("{k}x{k} normal equations")))?,
    };
    let mut coefficients = vec![0.0; problem.dim()];
    for (r, &j) in keep.iter().enumerate() {
        coefficients[j] = sol[r];
    }
    if let Some(t) = trace {
        t.push(problem.objective(&coefficients));
    }
    Ok(QuadraticSolution {
        coefficients,
        dropped,
        sweeps: 1,
        converged: true,
    })
}

#[inline]
fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent on the covariance form, alternating full sweeps
/// with sweeps restricted to the current non-zero set.
fn solve_lasso(
    problem: &PenalizedQuadraticProblem,
    dropped: Vec<usize>,
    start: Option<&[f64]>,
    mut trace: Option<&mut Vec<f64>>,
) -> QuadraticSolution {
    let j = problem.dim();
    let g = &problem.gram;
    let half_lambda = problem.lambda / 2.0;
    let mut rho = match start {
        Some(s) if s.len() == j => s.to_vec(),
        _ => vec![0.0; j],
    };
    for &d in &dropped {
        rho[d] = 0.0;
    }
    // grad[k] = (Gρ)_k
    let mut grad: Vec<f64> = (0..j).map(|r| (0..j).map(|c| g[(r, c)] * rho[c]).sum()).collect();
    let live: Vec<usize> = (0..j).filter(|k| !dropped.contains(k)).collect();

    let sweep = |coords: &[usize], rho: &mut Vec<f64>, grad: &mut Vec<f64>| -> f64 {
        let mut max_change: f64 = 0.0;
        for &k in coords {
            let gkk = g[(k, k)];
            let r = problem.linear[k] - grad[k] + gkk * rho[k];
            let new = if problem.penalized[k] {
                soft_threshold(r, half_lambda) / gkk
            } else {
                r / gkk
            };
            let delta = new - rho[k];
            if delta != 0.0 {
                rho[k] = new;
                for (m, gm) in grad.iter_mut().enumerate() {
                    *gm += g[(m, k)] * delta;
                }
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    };

    let mut sweeps = 0;
    let mut converged = false;
    'outer: while sweeps < CD_MAX_SWEEPS {
        let change = sweep(&live, &mut rho, &mut grad);
        sweeps += 1;
        if let Some(t) = trace.as_deref_mut() {
            t.push(problem.objective(&rho));
        }
        if change < CD_TOLERANCE {
            converged = true;
            break;
        }
        let active: Vec<usize> = live.iter().copied().filter(|&k| rho[k] != 0.0).collect();
        let mut inner = 0;
        while sweeps < CD_MAX_SWEEPS {
            let change = sweep(&active, &mut rho, &mut grad);
            sweeps += 1;
            inner += 1;
            if let Some(t) = trace.as_deref_mut() {
                t.push(problem.objective(&rho));
            }
            if change < CD_TOLERANCE {
                continue 'outer;
            }
            if inner % POLISH_EVERY == 0 {
                if let Some(exact) = feature_sign(problem, &live, &rho).filter(|e| problem.objective(e) <= problem.objective(&rho)) {
                    rho = exact;
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(problem.objective(&rho));
                    }
                    converged = true;
                    break 'outer;
                }
            }
        }
    }
    if !converged {
        log::warn!("coordinate descent stopped after {CD_MAX_SWEEPS} sweeps without converging");
    }
    QuadraticSolution {
        coefficients: rho,
        dropped,
        sweeps,
        converged,
    }
}

/// Feature-sign search started from `rho`: repeatedly solves the quadratic
/// on the current support with fixed signs, backtracks to the best zero
/// crossing when a sign flips, then admits the most violating inactive atom.
/// Every step lowers the objective. Returns `None` if a support system is
/// singular or the iteration budget runs out.
fn feature_sign(problem: &PenalizedQuadraticProblem, live: &[usize], rho: &[f64]) -> Option<Vec<f64>> {
    let half = problem.lambda / 2.0;
    let tol = 1e-11 * (1.0 + problem.linear.amax());
    let mut x = rho.to_vec();
    let mut theta: Vec<f64> = x.iter().map(|v| if *v == 0.0 { 0.0 } else { v.signum() }).collect();
    let mut active: Vec<usize> = live
        .iter()
        .copied()
        .filter(|&k| !problem.penalized[k] || x[k] != 0.0)
        .collect();
    let budget = 20 * (live.len() + 1);
    for _ in 0..budget {
        // Optimize on the current support until the signs are consistent.
        for _ in 0..budget {
            if active.is_empty() {
                break;
            }
            let k = active.len();
            let a = DMatrix::from_fn(k, k, |r, c| problem.gram[(active[r], active[c])]);
            let b = DVector::from_fn(k, |r, _| {
                let j = active[r];
                problem.linear[j] - if problem.penalized[j] { half * theta[j] } else { 0.0 }
            });
            let sol = a.cholesky()?.solve(&b);
            let mut target = vec![0.0; x.len()];
            for (r, &j) in active.iter().enumerate() {
                target[j] = sol[r];
            }
            let consistent = active
                .iter()
                .all(|&j| !problem.penalized[j] || target[j].signum() == theta[j]);
            if consistent {
                x = target;
                break;
            }
            // Candidate points where a coefficient reaches zero along x → target.
            let mut best = target.clone();
            let mut best_obj = problem.objective(&target);
            for &j in &active {
                if !problem.penalized[j] || target[j].signum() == theta[j] || x[j] == 0.0 {
                    continue;
                }
                let t = x[j] / (x[j] - target[j]);
                if !(0.0..=1.0).contains(&t) {
                    continue;
                }
                let mut cand: Vec<f64> = x.iter().zip(&target).map(|(a, b)| a + t * (b - a)).collect();
                cand[j] = 0.0;
                let obj = problem.objective(&cand);
                if obj < best_obj {
                    best_obj = obj;
                    best = cand;
                }
            }
            x = best;
            active.retain(|&j| !problem.penalized[j] || x[j] != 0.0);
            for j in 0..x.len() {
                theta[j] = if x[j] == 0.0 { 0.0 } else { x[j].signum() };
            }
        }
        let grad = &problem.gram * DVector::from_column_slice(&x);
        let mut worst: Option<(usize, f64)> = None;
        for &j in live.iter().filter(|j| !active.contains(j)) {
            let resid = problem.linear[j] - grad[j];
            let excess = resid.abs() - half;
            if excess > tol && worst.is_none_or(|(_, e)| excess > e) {
                worst = Some((j, excess));
            }
        }
        match worst {
            None => {
                return (kkt_violation(problem, &x) <= 1e3 * tol).then_some(x);
            }
            Some((j, _)) => {
                theta[j] = (problem.linear[j] - grad[j]).signum();
                active.push(j);
            }
        }
    }
    None
}

/// Largest KKT violation of an L1 solution: `|l_j - (Gρ)_j|` must be at most
/// `λ/2` on penalized atoms and zero on free ones.
pub fn kkt_violation(problem: &PenalizedQuadraticProblem, rho: &[f64]) -> f64 {
    let r = DVector::from_column_slice(rho);
    let grad = &problem.gram * &r;
    let half = problem.lambda / 2.0;
    (0..problem.dim())
        .filter(|&j| problem.gram[(j, j)] > DEGENERATE_DIAGONAL)
        .map(|j| {
            let resid = problem.linear[j] - grad[j];
            if !problem.penalized[j] {
                resid.abs()
            } else if rho[j] == 0.0 {
                (resid.abs() - half).max(0.0)
            } else {
                (resid - half * rho[j].signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}
