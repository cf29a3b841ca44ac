//! One-sided finite differences of a fitted regression `h(x, v)`.
//!
//! These only need out-of-sample predictions, so they apply to any learner.

use super::Regressor;

fn point(x: &[f64], v: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(x.len() + 1);
    p.extend_from_slice(x);
    p.push(v);
    p
}

/// `(h(x, v + t) - h(x, v)) / t`
pub fn numerical_dv(h: &dyn Regressor, x: &[f64], v: f64, t: f64) -> f64 {
    let mut p = point(x, v);
    let base = h.predict(&p);
    p[x.len()] = v + t;
    (h.predict(&p) - base) / t
}

/// `(h(x + s, v) - h(x, v)) / s` for scalar `x`.
pub fn numerical_dx(h: &dyn Regressor, x: f64, v: f64, s: f64) -> f64 {
    (h.predict(&[x + s, v]) - h.predict(&[x, v])) / s
}

/// Four-point mixed difference
/// `(h(x+s, v+t) - h(x+s, v) - h(x, v+t) + h(x, v)) / (s·t)`.
pub fn numerical_dxdv(h: &dyn Regressor, x: f64, v: f64, s: f64, t: f64) -> f64 {
    let hpp = h.predict(&[x + s, v + t]);
    let hp0 = h.predict(&[x + s, v]);
    let h0p = h.predict(&[x, v + t]);
    let h00 = h.predict(&[x, v]);
    (hpp - hp0 - h0p + h00) / (s * t)
}
