//! Polynomial section algebra: monomial bases, continuity propagation, and
//! curvature quadratic forms.
//!
//! Sections use the shifted monomial basis `tau^m`, `tau = x - x_prev`,
//! `m = 0..=d`. All factorial-style integer products (falling factorials,
//! binomials) are computed exactly in integer arithmetic and converted to
//! f64 once; powers are accumulated by repeated multiplication so results
//! are deterministic across platforms.

use crate::core::{Action, Spline, SplineConfig, MAX_ORDER};
use crate::linalg::Mat;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplinalgError {
    #[error("section length must be positive and finite, got {u}")]
    NonPositiveSectionLength { u: f64 },
    #[error("order {d} exceeds the supported maximum {MAX_ORDER}")]
    UnsupportedOrder { d: usize },
    #[error("x={x} lies outside the spline domain [{lo}, {hi}]")]
    OutOfDomain { x: f64, lo: f64, hi: f64 },
}

/// Falling factorial `m (m-1) ... (m-k+1)` as f64; 1 for k = 0, 0 when k > m.
fn falling(m: usize, k: usize) -> f64 {
    if k > m {
        return 0.0;
    }
    let mut acc: u64 = 1;
    for j in 0..k {
        acc *= (m - j) as u64;
    }
    acc as f64
}

/// Binomial coefficient `C(m, k)` as f64; 0 when k > m.
fn binomial(m: usize, k: usize) -> f64 {
    if k > m {
        return 0.0;
    }
    let mut num: u64 = 1;
    let mut den: u64 = 1;
    for j in 0..k {
        num *= (m - j) as u64;
        den *= (j + 1) as u64;
    }
    (num / den) as f64
}

/// `[1, tau, tau^2, ..., tau^d]` with `tau = x - x_prev`.
pub fn basis_vector(x: f64, x_prev: f64, d: usize) -> Vec<f64> {
    let tau = x - x_prev;
    let mut out = vec![0.0; d + 1];
    let mut p = 1.0;
    for slot in out.iter_mut() {
        *slot = p;
        p *= tau;
    }
    out
}

/// k-th derivative of the basis: entry m is `m(m-1)...(m-k+1) tau^(m-k)`,
/// and exactly zero when m < k (no negative powers are ever formed).
pub fn basis_derivative(x: f64, x_prev: f64, d: usize, k: usize) -> Vec<f64> {
    let tau = x - x_prev;
    let mut out = vec![0.0; d + 1];
    if k > d {
        return out;
    }
    let mut p = 1.0;
    for m in k..=d {
        out[m] = falling(m, k) * p;
        p *= tau;
    }
    out
}

/// Continuity vector of the next section: entry q (0-based) is
/// `g^(q)(u) / q!` of the previous section, i.e. the coefficients the next
/// section must start with to match value and the first `phi` derivatives.
pub fn continuity_vector(prev: &Action, u: f64, cfg: SplineConfig) -> Vec<f64> {
    let a = prev.coeffs();
    let mut e = vec![0.0; cfg.head_len()];
    for (q, slot) in e.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut p = 1.0;
        for m in q..a.len() {
            acc += a[m] * binomial(m, q) * p;
            p *= u;
        }
        *slot = acc;
    }
    e
}

/// Gram matrix of the section curvature `integral over (0, u] of g''(tau)^2`:
/// `a^T M a` is that integral. Rows and columns for the constant and linear
/// coefficients are identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureMatrix {
    mat: Mat,
    u: f64,
}

impl CurvatureMatrix {
    pub fn mat(&self) -> &Mat {
        &self.mat
    }

    pub fn u(&self) -> f64 {
        self.u
    }

    pub fn quad_form(&self, a: &[f64]) -> f64 {
        let n = self.mat.rows();
        assert_eq!(a.len(), n, "coefficient count mismatch");
        let mut acc = 0.0;
        for r in 0..n {
            let row = self.mat.row(r);
            let mut s = 0.0;
            for c in 0..n {
                s += row[c] * a[c];
            }
            acc += a[r] * s;
        }
        acc
    }
}

/// `[M]_(m,n) = m(m-1) n(n-1) u^(m+n-3) / (m+n-3)` for m, n >= 2 (0-based),
/// zero elsewhere.
pub fn curvature_matrix(u: f64, d: usize) -> Result<CurvatureMatrix, SplinalgError> {
    if !(u > 0.0) || !u.is_finite() {
        return Err(SplinalgError::NonPositiveSectionLength { u });
    }
    if d > MAX_ORDER {
        return Err(SplinalgError::UnsupportedOrder { d });
    }
    // u^1 .. u^(2d-3), accumulated multiplicatively.
    let top = if d >= 2 { 2 * d - 3 } else { 0 };
    let mut upow = vec![1.0; top + 1];
    for i in 1..=top {
        upow[i] = upow[i - 1] * u;
    }
    let mut mat = Mat::zeros(d + 1, d + 1);
    for m in 2..=d {
        for n in 2..=d {
            let k = m + n - 3;
            mat[(m, n)] = falling(m, 2) * falling(n, 2) / k as f64 * upow[k];
        }
    }
    Ok(CurvatureMatrix { mat, u })
}

/// `a^T M a` for one section.
pub fn section_curvature(a: &Action, m: &CurvatureMatrix) -> f64 {
    m.quad_form(a.coeffs())
}

/// Evaluates the k-th derivative of the spline at `x`.
///
/// Sections own the half-open span `(x_{t-1}, x_t]`; the left endpoint of the
/// domain is served by the first section's right-sided limit.
pub fn spline_eval(s: &Spline, x: f64, k: usize) -> Result<f64, SplinalgError> {
    let knots = s.knots();
    let lo = knots[0];
    let hi = knots[knots.len() - 1];
    if !(x >= lo && x <= hi) {
        return Err(SplinalgError::OutOfDomain { x, lo, hi });
    }
    // Smallest t with x <= knots[t + 1].
    let t = knots[1..knots.len() - 1].partition_point(|&kn| kn < x);
    let basis = basis_derivative(x, knots[t], s.config().d(), k);
    Ok(crate::linalg::dot(&basis, s.sections()[t].coeffs()))
}

/// Total curvature: sum of the per-section quadratic forms.
pub fn spline_curvature(s: &Spline) -> f64 {
    let d = s.config().d();
    let mut acc = 0.0;
    for (t, sec) in s.sections().iter().enumerate() {
        let u = s.knots()[t + 1] - s.knots()[t];
        let m = curvature_matrix(u, d).expect("validated spline has positive gaps");
        acc += section_curvature(sec, &m);
    }
    acc
}

/// Composite-Simpson check value for one section's curvature integral.
/// `panels` must be at least 64 (rounded up to an even count).
pub fn numeric_section_curvature(coeffs: &[f64], u: f64, panels: usize) -> f64 {
    assert!(panels >= 64, "use at least 64 panels");
    let n = panels + (panels & 1);
    let h = u / n as f64;
    let second = |tau: f64| -> f64 {
        let mut acc = 0.0;
        let mut p = 1.0;
        for m in 2..coeffs.len() {
            acc += coeffs[m] * falling(m, 2) * p;
            p *= tau;
        }
        acc * acc
    };
    let mut sum = second(0.0) + second(u);
    for i in 1..n {
        let w = if i & 1 == 1 { 4.0 } else { 2.0 };
        sum += w * second(i as f64 * h);
    }
    sum * h / 3.0
}

/// Quadrature version of [`spline_curvature`], used as an independent oracle.
pub fn numeric_curvature(s: &Spline, panels: usize) -> f64 {
    let mut acc = 0.0;
    for (t, sec) in s.sections().iter().enumerate() {
        let u = s.knots()[t + 1] - s.knots()[t];
        acc += numeric_section_curvature(sec.coeffs(), u, panels);
    }
    acc
}

/// Builds a valid spline from an initial condition and the free (trailing)
/// coefficients of every section; the pinned leading coefficients are filled
/// in by continuity propagation. This is the generic constructor for smooth
/// splines and mirrors how the streaming reconstructor commits sections.
pub fn assemble_smooth_spline(
    cfg: SplineConfig,
    knots: &[f64],
    e0: &[f64],
    tails: &[Vec<f64>],
) -> Result<Spline, crate::core::CoreError> {
    assert_eq!(knots.len(), tails.len() + 1, "one tail per knot gap");
    let mut sections: Vec<Action> = Vec::with_capacity(tails.len());
    let mut head = e0.to_vec();
    for (t, tail) in tails.iter().enumerate() {
        let mut coeffs = head.clone();
        coeffs.extend_from_slice(tail);
        let action = Action::new(cfg, coeffs)?;
        if t + 1 < tails.len() {
            let u = knots[t + 1] - knots[t];
            head = continuity_vector(&action, u, cfg);
        }
        sections.push(action);
    }
    Spline::new(cfg, knots.to_vec(), sections, e0.to_vec())
}
