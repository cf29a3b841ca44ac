//! Polynomial dictionaries `b_J` over `(x, v)` and `c_K` over `z`.
//!
//! Every atom is a monomial in the input coordinates, so partial derivatives
//! are exact and averages over counterfactual `x*` draws factor into an
//! `x`-part (precomputed once) times a `v`-part.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::CounterfactualDraws;

/// Highest exponent allowed on any single coordinate.
pub const MAX_DEGREE: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    OverZ,
    OverXv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DictionaryFamily {
    /// Full tensor product of powers `x_k^a` (`a <= degree_x`) and `v^b` (`b <= degree_v`).
    TensorPolynomial { degree_x: u32, degree_v: u32 },
    /// `1, x_1..x_k, v, v^2, .., v^degree_v`.
    PartlyLinear { degree_v: u32 },
    /// `1`, every raw coordinate and every pairwise product of distinct coordinates.
    RawPlusInteractions,
    /// `1` and every raw coordinate.
    Linear,
    /// All monomials of total degree at most `degree`.
    Polynomial { degree: u32 },
}

type Monomial = Vec<(usize, u32)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    family: DictionaryFamily,
    kind: InputKind,
    dim: usize,
    atoms: Vec<Monomial>,
}

impl Dictionary {
    /// `dim` is the number of input coordinates: `p` over `z`, `dim_x + 1` over `(x, v)`.
    pub fn new(family: DictionaryFamily, kind: InputKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dictionary input dimension must be positive".into()));
        }
        let check = |deg: u32, what: &str| {
            if deg > MAX_DEGREE {
                Err(Error::Config(format!("{what} = {deg} exceeds the cap of {MAX_DEGREE}")))
            } else {
                Ok(())
            }
        };
        let atoms = match family {
            DictionaryFamily::TensorPolynomial { degree_x, degree_v } => {
                require_xv(kind, "tensor_polynomial")?;
                check(degree_x, "degree_x")?;
                check(degree_v, "degree_v")?;
                tensor_atoms(dim - 1, degree_x, degree_v)
            }
            DictionaryFamily::PartlyLinear { degree_v } => {
                require_xv(kind, "partly_linear")?;
                check(degree_v, "degree_v")?;
                let mut atoms = vec![Vec::new()];
                atoms.extend((0..dim - 1).map(|c| vec![(c, 1)]));
                atoms.extend((1..=degree_v).map(|e| vec![(dim - 1, e)]));
                atoms
            }
            DictionaryFamily::RawPlusInteractions => {
                let mut atoms = vec![Vec::new()];
                atoms.extend((0..dim).map(|c| vec![(c, 1)]));
                for a in 0..dim {
                    for b in a + 1..dim {
                        atoms.push(vec![(a, 1), (b, 1)]);
                    }
                }
                atoms
            }
            DictionaryFamily::Linear => {
                let mut atoms = vec![Vec::new()];
                atoms.extend((0..dim).map(|c| vec![(c, 1)]));
                atoms
            }
            DictionaryFamily::Polynomial { degree } => {
                check(degree, "degree")?;
                total_degree_atoms(dim, degree)
            }
        };
        Ok(Self {
            family,
            kind,
            dim,
            atoms,
        })
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> InputKind {
        self.kind
    }

    pub fn family(&self) -> &DictionaryFamily {
        &self.family
    }

    /// Exponent of `coord` in atom `j`.
    pub fn exponent(&self, j: usize, coord: usize) -> u32 {
        self.atoms[j]
            .iter()
            .find(|(c, _)| *c == coord)
            .map(|&(_, e)| e)
            .unwrap_or(0)
    }

    fn check_point(&self, point: &[f64]) -> Result<()> {
        if point.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: point.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, point: &[f64]) -> Result<Vec<f64>> {
        self.check_point(point)?;
        let mut out = vec![0.0; self.len()];
        self.eval_into(point, &mut out);
        Ok(out)
    }

    /// Analytic `∂/∂v` of every atom (`v` is the last coordinate).
    pub fn eval_dv(&self, point: &[f64]) -> Result<Vec<f64>> {
        if self.kind != InputKind::OverXv {
            return Err(Error::Config("derivative in v requested on a dictionary over z".into()));
        }
        self.check_point(point)?;
        let mut out = vec![0.0; self.len()];
        self.eval_partial_into(point, self.dim - 1, &mut out);
        Ok(out)
    }

    pub fn eval_partial(&self, point: &[f64], coord: usize) -> Result<Vec<f64>> {
        self.check_point(point)?;
        if coord >= self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: coord + 1,
            });
        }
        let mut out = vec![0.0; self.len()];
        self.eval_partial_into(point, coord, &mut out);
        Ok(out)
    }

    pub(crate) fn eval_into(&self, point: &[f64], out: &mut [f64]) {
        for (slot, atom) in out.iter_mut().zip(&self.atoms) {
            *slot = atom.iter().map(|&(c, e)| point[c].powi(e as i32)).product();
        }
    }

    pub(crate) fn eval_partial_into(&self, point: &[f64], coord: usize, out: &mut [f64]) {
        for (slot, atom) in out.iter_mut().zip(&self.atoms) {
            *slot = match atom.iter().find(|(c, _)| *c == coord) {
                None => 0.0,
                Some(&(_, e)) => atom
                    .iter()
                    .map(|&(c, f)| {
                        if c == coord {
                            e as f64 * point[c].powi(f as i32 - 1)
                        } else {
                            point[c].powi(f as i32)
                        }
                    })
                    .product(),
            };
        }
    }
}

fn require_xv(kind: InputKind, name: &str) -> Result<()> {
    if kind != InputKind::OverXv {
        return Err(Error::Config(format!("{name} dictionaries are defined over (x, v) only")));
    }
    Ok(())
}

fn tensor_atoms(dim_x: usize, degree_x: u32, degree_v: u32) -> Vec<Monomial> {
    let mut atoms = Vec::new();
    let base = degree_x + 1;
    let x_combos = (base as usize).pow(dim_x as u32);
    for ev in 0..=degree_v {
        for mut code in 0..x_combos {
            let mut atom = Vec::new();
            for c in 0..dim_x {
                let e = (code % base as usize) as u32;
                code /= base as usize;
                if e > 0 {
                    atom.push((c, e));
                }
            }
            if ev > 0 {
                atom.push((dim_x, ev));
            }
            atoms.push(atom);
        }
    }
    atoms
}

fn total_degree_atoms(dim: usize, degree: u32) -> Vec<Monomial> {
    fn rec(start: usize, dim: usize, left: u32, current: &mut Monomial, out: &mut Vec<Monomial>) {
        if left == 0 {
            out.push(current.clone());
            return;
        }
        for c in start..dim {
            // Multiset of coordinates, kept non-decreasing so each monomial appears once.
            match current.last_mut() {
                Some((last, e)) if *last == c => *e += 1,
                _ => current.push((c, 1)),
            }
            rec(c, dim, left - 1, current, out);
            match current.last_mut() {
                Some((_, e)) if *e > 1 => *e -= 1,
                _ => {
                    current.pop();
                }
            }
        }
    }
    let mut atoms = Vec::new();
    for d in 0..=degree {
        rec(0, dim, d, &mut Vec::new(), &mut atoms);
    }
    atoms
}

/// A dictionary composed with a per-coordinate affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    dict: Dictionary,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl Basis {
    pub fn identity(dict: Dictionary) -> Self {
        let d = dict.input_dim();
        Self {
            dict,
            shift: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    /// Standardizes each coordinate to zero mean and unit variance over `points`.
    /// A constant coordinate keeps unit scale, so its non-constant atoms vanish.
    pub fn standardized<'a, I>(dict: Dictionary, points: I) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let d = dict.input_dim();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0usize;
        for p in points {
            for c in 0..d {
                sum[c] += p[c];
                sq[c] += p[c] * p[c];
            }
            n += 1;
        }
        if n == 0 {
            return Self::identity(dict);
        }
        let nf = n as f64;
        let shift: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let scale = (0..d)
            .map(|c| {
                let var = (sq[c] / nf - shift[c] * shift[c]).max(0.0);
                let sd = var.sqrt();
                if sd > 1e-12 * (1.0 + shift[c].abs()) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { dict, shift, scale }
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dict
    }

    pub fn len(&self) -> usize {
        self.dict.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dict.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.dict.input_dim()
    }

    #[inline]
    fn with_standardized<R>(&self, point: &[f64], f: impl FnOnce(&[f64]) -> R) -> R {
        let d = self.shift.len();
        let mut stack = [0.0f64; 16];
        let mut heap;
        let u: &mut [f64] = if d <= 16 {
            &mut stack[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        for c in 0..d {
            u[c] = (point[c] - self.shift[c]) / self.scale[c];
        }
        f(u)
    }

    pub fn eval_into(&self, point: &[f64], out: &mut [f64]) {
        self.with_standardized(point, |u| self.dict.eval_into(u, out));
    }

    pub fn eval(&self, point: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(point, &mut out);
        out
    }

    pub fn eval_partial_into(&self, point: &[f64], coord: usize, out: &mut [f64]) {
        self.with_standardized(point, |u| self.dict.eval_partial_into(u, coord, out));
        let inv = 1.0 / self.scale[coord];
        out.iter_mut().for_each(|o| *o *= inv);
    }

    pub fn eval_dv_into(&self, point: &[f64], out: &mut [f64]) {
        self.eval_partial_into(point, self.input_dim() - 1, out);
    }

    pub fn eval_dv(&self, point: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_dv_into(point, &mut out);
        out
    }

    /// `Σ_j coef_j b_j(point)` without allocating.
    pub fn dot(&self, point: &[f64], coef: &[f64]) -> f64 {
        self.with_standardized(point, |u| {
            self.dict
                .atoms
                .iter()
                .zip(coef)
                .filter(|(_, &c)| c != 0.0)
                .map(|(atom, &c)| c * atom.iter().map(|&(k, e)| u[k].powi(e as i32)).product::<f64>())
                .sum()
        })
    }

    /// Averages every atom over the `x*` draws, keeping `v` free.
    pub fn average_over_x(&self, draws: &CounterfactualDraws) -> AveragedBasis {
        assert_eq!(self.dict.kind, InputKind::OverXv, "x-averaging needs an (x, v) dictionary");
        let v_coord = self.input_dim() - 1;
        let mut x_means = vec![0.0; self.len()];
        let mut u = vec![0.0; v_coord];
        for x in draws.points() {
            for c in 0..v_coord {
                u[c] = (x[c] - self.shift[c]) / self.scale[c];
            }
            for (m, atom) in x_means.iter_mut().zip(&self.dict.atoms) {
                *m += atom
                    .iter()
                    .filter(|(c, _)| *c != v_coord)
                    .map(|&(c, e)| u[c].powi(e as i32))
                    .product::<f64>();
            }
        }
        let s = draws.len() as f64;
        x_means.iter_mut().for_each(|m| *m /= s);
        let v_exp = (0..self.len()).map(|j| self.dict.exponent(j, v_coord)).collect();
        AveragedBasis {
            x_means,
            v_exp,
            shift_v: self.shift[v_coord],
            scale_v: self.scale[v_coord],
        }
    }
}

/// `(1/S) Σ_s b_j(x*_s, v)` as a function of `v` alone.
#[derive(Debug, Clone)]
pub struct AveragedBasis {
    x_means: Vec<f64>,
    v_exp: Vec<u32>,
    shift_v: f64,
    scale_v: f64,
}

impl AveragedBasis {
    pub fn len(&self) -> usize {
        self.x_means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_means.is_empty()
    }

    pub fn eval_into(&self, v: f64, out: &mut [f64]) {
        let u = (v - self.shift_v) / self.scale_v;
        for ((o, &m), &e) in out.iter_mut().zip(&self.x_means).zip(&self.v_exp) {
            *o = m * u.powi(e as i32);
        }
    }

    pub fn dot(&self, v: f64, coef: &[f64]) -> f64 {
        let u = (v - self.shift_v) / self.scale_v;
        self.x_means
            .iter()
            .zip(&self.v_exp)
            .zip(coef)
            .map(|((&m, &e), &c)| c * m * u.powi(e as i32))
            .sum()
    }

    pub fn dot_dv(&self, v: f64, coef: &[f64]) -> f64 {
        let u = (v - self.shift_v) / self.scale_v;
        self.x_means
            .iter()
            .zip(&self.v_exp)
            .zip(coef)
            .filter(|((_, &e), _)| e > 0)
            .map(|((&m, &e), &c)| c * m * e as f64 * u.powi(e as i32 - 1))
            .sum::<f64>()
            / self.scale_v
    }
}
