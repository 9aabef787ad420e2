//! Per-step decision rules: quadratic costs over the next section's
//! coefficients and the closed-form consistency projection.
//!
//! Every policy scores candidate coefficient vectors `a` with a convex
//! quadratic `a^T A a + b^T a` and then minimizes it subject to (i) the
//! pinned continuity head and (ii) the interval constraint
//! `|a^T p(x_t) - y_t| <= eps_t`. After eliminating the head, the feasible
//! set is a hyperslab in the free coefficients, so the minimizer is either
//! the unconstrained optimum or its projection (in the metric of the reduced
//! Hessian) onto the nearer slab face. No iterative solver is involved; the
//! entire step is a couple of small Cholesky solves.
//!
//! The three policies differ only in `(A, b)`:
//! - myopic: `A = M`, `b = 0` (minimum curvature for the new section alone);
//! - parametrized: `A = M + lambda R`, `b = lambda v`, where `(R, v)` is a
//!   closed-form expected cost-to-go under a mean-reverting prior with rate
//!   `gamma` and level `mu`;
//! - recurrent: `A = M + lambda I`, `b = -2 lambda [0; n]`, pulling the free
//!   coefficients toward a GRU prediction `n`.

use crate::core::{Action, CoreError, RtiState, SplineConfig};
use crate::linalg::{dot, Cholesky, Mat};
use crate::splinalg::{basis_vector, curvature_matrix, CurvatureMatrix, SplinalgError};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("cost-to-go horizon rate must be positive, got gamma={gamma}")]
    NonPositiveGamma { gamma: f64 },
    #[error("cost matrix must be symmetric, found asymmetry {gap:.3e}")]
    AsymmetricCost { gap: f64 },
    #[error("reduced cost block is not positive definite")]
    SingularD,
    #[error("slab direction must be nonzero")]
    DegenerateSlab,
    #[error("recurrent policy needs a network output to assemble its cost")]
    MissingRnnOutput,
    #[error("expected input of dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Splinalg(#[from] SplinalgError),
}

/// Convex quadratic `a^T A a + b^T a` over section coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    a_mat: Mat,
    b: Vec<f64>,
}

impl QuadraticCost {
    /// Requires a square symmetric `A` (within 1e-12 relative) matching `b`.
    pub fn new(a_mat: Mat, b: Vec<f64>) -> Result<QuadraticCost, PolicyError> {
        if a_mat.rows() != a_mat.cols() || a_mat.rows() != b.len() {
            return Err(PolicyError::DimensionMismatch { expected: a_mat.rows(), got: b.len() });
        }
        let scale = crate::linalg::norm_inf(a_mat.data()).max(1.0);
        let gap = a_mat.asymmetry();
        if gap > 1e-12 * scale {
            return Err(PolicyError::AsymmetricCost { gap });
        }
        Ok(QuadraticCost { a_mat, b })
    }

    pub fn a_mat(&self) -> &Mat {
        &self.a_mat
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn value(&self, a: &[f64]) -> f64 {
        let mut acc = dot(&self.a_mat.matvec(a), a);
        acc += dot(&self.b, a);
        acc
    }
}

/// Closed-form cost-to-go pair `(R, v)` for the parametrized policy.
///
/// Entries depend only on `n = i + j` (0-based indices):
/// `T_n = (n! / gamma^n) * sum_{k<=n} (gamma u)^k / k!`, with
/// `R[i][j] = T_{i+j}` and `v[i] = -2 mu T_i`.
pub fn cost_to_go_matrices(
    u: f64,
    gamma: f64,
    mu: f64,
    d: usize,
) -> Result<(Mat, Vec<f64>), PolicyError> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(PolicyError::NonPositiveGamma { gamma });
    }
    if !(u > 0.0) || !u.is_finite() {
        return Err(SplinalgError::NonPositiveSectionLength { u }.into());
    }
    let top = 2 * d;
    let g = gamma * u;
    let inv_gamma = 1.0 / gamma;
    let mut t = vec![0.0; top + 1];
    let mut term = 1.0; // (gamma u)^k / k!
    let mut s = 1.0; // running sum of term
    let mut fact = 1.0; // n!
    let mut ipow = 1.0; // gamma^-n
    t[0] = 1.0;
    for n in 1..=top {
        term *= g / n as f64;
        s += term;
        fact *= n as f64;
        ipow *= inv_gamma;
        t[n] = fact * ipow * s;
    }
    let r = Mat::from_fn(d + 1, d + 1, |i, j| t[i + j]);
    let v = (0..=d).map(|i| -2.0 * mu * t[i]).collect();
    Ok((r, v))
}

/// Trainable scalars of the parametrized policy. `gamma = exp(gamma_raw)` and
/// `lambda = exp(lambda_raw)` keep both positive under unconstrained updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParametrizedParams {
    pub mu: f64,
    pub gamma_raw: f64,
    pub lambda_raw: f64,
}

impl Default for ParametrizedParams {
    /// Start at the myopic-adjacent point: level 0, unit rate, small weight.
    fn default() -> Self {
        ParametrizedParams { mu: 0.0, gamma_raw: 0.0, lambda_raw: 0.1f64.ln() }
    }
}

/// Dense affine map `x -> W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Affine {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.w.cols(), x.len(), "affine input mismatch");
        let mut out = self.w.matvec(x);
        for (o, bi) in out.iter_mut().zip(&self.b) {
            *o += bi;
        }
        out
    }
}

/// One GRU layer (gate-major weight layout, hidden-to-hidden square).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruLayer {
    pub w_ir: Mat,
    pub w_iz: Mat,
    pub w_in: Mat,
    pub w_hr: Mat,
    pub w_hz: Mat,
    pub w_hn: Mat,
    pub b_ir: Vec<f64>,
    pub b_iz: Vec<f64>,
    pub b_in: Vec<f64>,
    pub b_hr: Vec<f64>,
    pub b_hz: Vec<f64>,
    pub b_hn: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GruLayer {
    /// Standard gated update:
    /// `r = sig(W_ir x + b_ir + W_hr h + b_hr)`,
    /// `z = sig(W_iz x + b_iz + W_hz h + b_hz)`,
    /// `n = tanh(W_in x + b_in + r .* (W_hn h + b_hn))`,
    /// `h' = (1 - z) .* n + z .* h`.
    pub fn step(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hs = h.len();
        let mut r = self.w_ir.matvec(x);
        let mut z = self.w_iz.matvec(x);
        let mut n = self.w_in.matvec(x);
        let hr = self.w_hr.matvec(h);
        let hz = self.w_hz.matvec(h);
        let hn = self.w_hn.matvec(h);
        let mut out = vec![0.0; hs];
        for i in 0..hs {
            let ri = sigmoid(r[i] + self.b_ir[i] + hr[i] + self.b_hr[i]);
            let zi = sigmoid(z[i] + self.b_iz[i] + hz[i] + self.b_hz[i]);
            let ni = (n[i] + self.b_in[i] + ri * (hn[i] + self.b_hn[i])).tanh();
            r[i] = ri;
            z[i] = zi;
            n[i] = ni;
            out[i] = (1.0 - zi) * ni + zi * h[i];
        }
        out
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hr.rows()
    }
}

/// Per-layer hidden states carried across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct GruHidden {
    layers: Vec<Vec<f64>>,
}

impl GruHidden {
    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }
}

/// Weights of the recurrent policy: input embedding, stacked GRU, linear
/// readout onto the free coefficients, and the cost weight `lambda`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnParams {
    pub lambda_raw: f64,
    pub embed: Affine,
    pub layers: Vec<GruLayer>,
    pub readout: Affine,
}

impl RnnParams {
    /// Step input: `[u_t, y_t, eps_t, e_t...]`.
    pub fn input_dim(cfg: SplineConfig) -> usize {
        3 + cfg.head_len()
    }

    /// Uniform `+-1/sqrt(hidden)` weights, zero biases, `lambda = 0.1`.
    pub fn init(cfg: SplineConfig, rng: &mut impl Rng) -> RnnParams {
        Self::init_with(cfg, 32, 32, 2, rng)
    }

    pub fn init_with(
        cfg: SplineConfig,
        input_size: usize,
        hidden: usize,
        n_layers: usize,
        rng: &mut impl Rng,
    ) -> RnnParams {
        assert!(n_layers >= 1 && hidden >= 1 && input_size >= 1);
        let bound = 1.0 / (hidden as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let mut mat = |rows: usize, cols: usize| {
            Mat::from_fn(rows, cols, |_, _| dist.sample(rng))
        };
        let embed = Affine { w: mat(input_size, Self::input_dim(cfg)), b: vec![0.0; input_size] };
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let ind = if l == 0 { input_size } else { hidden };
            layers.push(GruLayer {
                w_ir: mat(hidden, ind),
                w_iz: mat(hidden, ind),
                w_in: mat(hidden, ind),
                w_hr: mat(hidden, hidden),
                w_hz: mat(hidden, hidden),
                w_hn: mat(hidden, hidden),
                b_ir: vec![0.0; hidden],
                b_iz: vec![0.0; hidden],
                b_in: vec![0.0; hidden],
                b_hr: vec![0.0; hidden],
                b_hz: vec![0.0; hidden],
                b_hn: vec![0.0; hidden],
            });
        }
        let readout = Affine { w: mat(cfg.tail_len(), hidden), b: vec![0.0; cfg.tail_len()] };
        RnnParams { lambda_raw: 0.1f64.ln(), embed, layers, readout }
    }

    /// All-zero hidden state (the start-of-sequence convention).
    pub fn initial_hidden(&self) -> GruHidden {
        GruHidden { layers: self.layers.iter().map(|l| vec![0.0; l.hidden_size()]).collect() }
    }
}

/// Runs embedding, the stacked GRU, and the readout for one step.
pub fn gru_forward(
    rnn: &RnnParams,
    input: &[f64],
    hidden: &GruHidden,
) -> Result<(Vec<f64>, GruHidden), PolicyError> {
    if input.len() != rnn.embed.w.cols() {
        return Err(PolicyError::DimensionMismatch {
            expected: rnn.embed.w.cols(),
            got: input.len(),
        });
    }
    if hidden.layers.len() != rnn.layers.len() {
        return Err(PolicyError::DimensionMismatch {
            expected: rnn.layers.len(),
            got: hidden.layers.len(),
        });
    }
    let mut x = rnn.embed.apply(input);
    let mut new_hidden = Vec::with_capacity(rnn.layers.len());
    for (layer, h) in rnn.layers.iter().zip(&hidden.layers) {
        let hv = layer.step(&x, h);
        x = hv.clone();
        new_hidden.push(hv);
    }
    let out = rnn.readout.apply(&x);
    Ok((out, GruHidden { layers: new_hidden }))
}

/// The decision rule used when committing a section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyParams {
    Myopic,
    Parametrized(ParametrizedParams),
    RnnBased(RnnParams),
}

impl PolicyParams {
    pub fn kind_name(&self) -> &'static str {
        match self {
            PolicyParams::Myopic => "myopic",
            PolicyParams::Parametrized(_) => "parametrized",
            PolicyParams::RnnBased(_) => "rnn_based",
        }
    }
}

/// Builds `(A, b)` for the given policy at one step. The recurrent policy
/// must supply its network output via `rnn_out`.
pub fn assemble_cost(
    m: &CurvatureMatrix,
    cfg: SplineConfig,
    params: &PolicyParams,
    rnn_out: Option<&[f64]>,
) -> Result<QuadraticCost, PolicyError> {
    let d = cfg.d();
    assert_eq!(m.mat().rows(), d + 1, "curvature matrix order mismatch");
    match params {
        PolicyParams::Myopic => QuadraticCost::new(m.mat().clone(), vec![0.0; d + 1]),
        PolicyParams::Parametrized(p) => {
            let gamma = p.gamma_raw.exp();
            let lambda = p.lambda_raw.exp();
            let (r, v) = cost_to_go_matrices(m.u(), gamma, p.mu, d)?;
            let a = m.mat().add(&r.scale(lambda));
            let b = v.iter().map(|vi| lambda * vi).collect();
            QuadraticCost::new(a, b)
        }
        PolicyParams::RnnBased(rnn) => {
            let n = rnn_out.ok_or(PolicyError::MissingRnnOutput)?;
            if n.len() != cfg.tail_len() {
                return Err(PolicyError::DimensionMismatch {
                    expected: cfg.tail_len(),
                    got: n.len(),
                });
            }
            let lambda = rnn.lambda_raw.exp();
            let a = m.mat().add(&Mat::identity(d + 1).scale(lambda));
            let mut b = vec![0.0; d + 1];
            for (i, &ni) in n.iter().enumerate() {
                b[cfg.head_len() + i] = -2.0 * lambda * ni;
            }
            QuadraticCost::new(a, b)
        }
    }
}

/// The step reduced to its free coefficients: minimize
/// `alpha^T D alpha - 2 o^T D alpha + const` subject to
/// `|q^T alpha - z| <= eps`, i.e. a slab constraint around the unconstrained
/// optimum `o` in the `D` metric.
#[derive(Debug, Clone)]
pub struct SlabProblem {
    d_mat: Mat,
    d_chol: Cholesky,
    o: Vec<f64>,
    q: Vec<f64>,
    z: f64,
    eps: f64,
}

impl SlabProblem {
    pub fn new(d_mat: Mat, o: Vec<f64>, q: Vec<f64>, z: f64, eps: f64) -> Result<SlabProblem, PolicyError> {
        if d_mat.rows() != o.len() || o.len() != q.len() {
            return Err(PolicyError::DimensionMismatch { expected: d_mat.rows(), got: o.len() });
        }
        if !(eps >= 0.0) {
            return Err(CoreError::NegativeHalfWidth { index: 0 }.into());
        }
        if q.iter().all(|&qi| qi == 0.0) {
            return Err(PolicyError::DegenerateSlab);
        }
        let d_chol = Cholesky::new(&d_mat).ok_or(PolicyError::SingularD)?;
        Ok(SlabProblem { d_mat, d_chol, o, q, z, eps })
    }

    pub fn d_mat(&self) -> &Mat {
        &self.d_mat
    }

    pub fn o(&self) -> &[f64] {
        &self.o
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }
}

/// Eliminates the pinned head from a full cost, producing the slab problem in
/// the free coefficients.
pub fn reduce_to_slab(
    cost: &QuadraticCost,
    state: &RtiState,
    cfg: SplineConfig,
) -> Result<SlabProblem, PolicyError> {
    let e = state.sigma().e();
    if e.len() != cfg.head_len() {
        return Err(CoreError::WrongStateDimension { expected: cfg.head_len(), got: e.len() }
            .into());
    }
    let head = cfg.head_len();
    let tail = cfg.tail_len();
    let a = cost.a_mat();
    if a.rows() != cfg.coeff_count() {
        return Err(PolicyError::DimensionMismatch { expected: cfg.coeff_count(), got: a.rows() });
    }
    let d_mat = a.block(head, head, tail, tail);
    let cross = a.block(head, 0, tail, head);
    let mut rhs = cross.matvec(e);
    for (r, &bi) in rhs.iter_mut().zip(&cost.b()[head..]) {
        *r += 0.5 * bi;
    }
    let d_chol = Cholesky::new(&d_mat).ok_or(PolicyError::SingularD)?;
    let o: Vec<f64> = d_chol.solve(&rhs).iter().map(|x| -x).collect();
    let p = basis_vector(state.interval().x, state.sigma().x_prev(), cfg.d());
    let q = p[head..].to_vec();
    let z = state.interval().y - dot(e, &p[..head]);
    Ok(SlabProblem { d_mat, d_chol, o, q, z, eps: state.interval().eps })
}

/// Closed-form minimizer over the slab: the unconstrained optimum if it is
/// already consistent, otherwise its D-metric projection onto the nearer
/// face `q^T alpha = z +- eps`.
///
/// The face equation is polished with a few refinement passes: when the cost
/// matrix mixes widely scaled entries (large cost-to-go terms), a single
/// correction can leave a residual around `kappa(D) * machine eps`, which
/// would erode the consistency certificate downstream.
pub fn hyperslab_project(slab: &SlabProblem) -> Vec<f64> {
    let s = dot(&slab.o, &slab.q);
    let target = if s > slab.z + slab.eps {
        slab.z + slab.eps
    } else if s < slab.z - slab.eps {
        slab.z - slab.eps
    } else {
        return slab.o.clone();
    };
    let dq = slab.d_chol.solve(&slab.q);
    let qdq = dot(&slab.q, &dq);
    let mut alpha: Vec<f64> = slab.o.clone();
    for _ in 0..3 {
        let res = dot(&alpha, &slab.q) - target;
        if res.abs() <= 1e-14 * target.abs().max(1.0) {
            break;
        }
        let c = res / qdq;
        for (ai, wi) in alpha.iter_mut().zip(&dq) {
            *ai -= c * wi;
        }
    }
    alpha
}

/// Commits one section: assembles the policy cost at the current state,
/// reduces it to the slab problem, projects, and splices the pinned head
/// back in. For the recurrent policy the hidden state advances by one step
/// (pass `None` at the start of a sequence).
pub fn evaluate_policy(
    state: &RtiState,
    cfg: SplineConfig,
    params: &PolicyParams,
    hidden: Option<GruHidden>,
) -> Result<(Action, Option<GruHidden>), PolicyError> {
    let e = state.sigma().e();
    if e.len() != cfg.head_len() {
        return Err(CoreError::WrongStateDimension { expected: cfg.head_len(), got: e.len() }
            .into());
    }
    let u = state.gap();
    let m = curvature_matrix(u, cfg.d())?;
    let (rnn_out, new_hidden) = match params {
        PolicyParams::RnnBased(rnn) => {
            let h = hidden.unwrap_or_else(|| rnn.initial_hidden());
            let mut input = Vec::with_capacity(RnnParams::input_dim(cfg));
            input.push(u);
            input.push(state.interval().y);
            input.push(state.interval().eps);
            input.extend_from_slice(e);
            let (out, h2) = gru_forward(rnn, &input, &h)?;
            (Some(out), Some(h2))
        }
        _ => (None, hidden),
    };
    let cost = assemble_cost(&m, cfg, params, rnn_out.as_deref())?;
    let slab = reduce_to_slab(&cost, state, cfg)?;
    let alpha = hyperslab_project(&slab);
    let mut coeffs = e.to_vec();
    coeffs.extend_from_slice(&alpha);
    Ok((Action::new(cfg, coeffs)?, new_hidden))
}
