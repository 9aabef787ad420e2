//! Batch minimum-curvature interpolation and a dense convex-QP solver.
//!
//! The batch problem optimizes all sections of a spline jointly: it is the
//! non-causal lower bound that the streaming policies are measured against.
//! The QP solver is deliberately general (equality and inequality
//! constraints over a PSD quadratic) so it also serves as an independent
//! oracle for the closed-form slab projection: the two implementations
//! share no code paths.

use crate::core::{CoreError, IntervalSequence, SplineConfig};
use crate::linalg::{dot, norm_inf, Cholesky, Lu, Mat};
use crate::rti::ReconstructionResult;
use crate::splinalg::{assemble_smooth_spline, basis_vector, curvature_matrix, section_curvature};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BatchError {
    /// The equality system is inconsistent or no point satisfies all
    /// inequalities.
    #[error("infeasible constraint set")]
    Infeasible,
    /// The interior-point iteration did not reach the tolerance.
    #[error("no convergence within {0} interior-point iterations")]
    MaxIterations(usize),
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Dense convex quadratic program
/// `minimize x^T H x + g^T x  subject to  E x = f,  G x <= h`.
///
/// The quadratic convention matches the policy costs (no 1/2 factor).
pub struct DenseQp {
    h_mat: Mat,
    g: Vec<f64>,
    eq_mat: Mat,
    eq_rhs: Vec<f64>,
    ineq_mat: Mat,
    ineq_rhs: Vec<f64>,
}

impl DenseQp {
    /// Unconstrained problem; constraints are added with the builders.
    pub fn new(h_mat: Mat, g: Vec<f64>) -> DenseQp {
        let n = g.len();
        assert!(
            h_mat.rows() == n && h_mat.cols() == n,
            "objective shape mismatch: {}x{} vs {n} variables",
            h_mat.rows(),
            h_mat.cols()
        );
        DenseQp {
            h_mat,
            g,
            eq_mat: Mat::zeros(0, n),
            eq_rhs: Vec::new(),
            ineq_mat: Mat::zeros(0, n),
            ineq_rhs: Vec::new(),
        }
    }

    fn n(&self) -> usize {
        self.g.len()
    }

    /// Appends one equality row `row . x = rhs`.
    pub fn push_equality(&mut self, row: &[f64], rhs: f64) {
        assert_eq!(row.len(), self.n(), "equality row length");
        let mut e = Mat::zeros(self.eq_mat.rows() + 1, self.n());
        e.set_block(0, 0, &self.eq_mat);
        e.row_mut(self.eq_mat.rows()).copy_from_slice(row);
        self.eq_mat = e;
        self.eq_rhs.push(rhs);
    }

    /// Appends one inequality row `row . x <= rhs`.
    pub fn push_inequality(&mut self, row: &[f64], rhs: f64) {
        assert_eq!(row.len(), self.n(), "inequality row length");
        let mut g = Mat::zeros(self.ineq_mat.rows() + 1, self.n());
        g.set_block(0, 0, &self.ineq_mat);
        g.row_mut(self.ineq_mat.rows()).copy_from_slice(row);
        self.ineq_mat = g;
        self.ineq_rhs.push(rhs);
    }

    /// Objective value at `x`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        dot(&self.h_mat.matvec(x), x) + dot(&self.g, x)
    }
}

/// Equality-eliminated form: `x = x0 + Z u`.
struct ReducedQp {
    x0: Vec<f64>,
    z_basis: Mat,
    q_mat: Mat,
    c: Vec<f64>,
    a_mat: Mat,
    b: Vec<f64>,
}

/// Rank/consistency tolerance for the equality elimination, relative to the
/// magnitude of the triangular factor.
const RANK_TOL: f64 = 1e-11;

fn eliminate_equalities(p: &DenseQp, tol: f64) -> Result<ReducedQp, BatchError> {
    let n = p.n();
    let k = p.eq_mat.rows();
    let (x0, z_basis) = if k == 0 {
        (vec![0.0; n], Mat::identity(n))
    } else if k > n {
        // Over-determined system: least squares via QR of E; feasible only
        // if the residual vanishes. Needs full column rank (always true for
        // the constraint sets built here).
        let qr = crate::linalg::qr(&p.eq_mat);
        let scale = (0..n)
            .map(|i| qr.r[(i, i)].abs())
            .fold(0.0f64, f64::max)
            .max(1.0);
        let rank = (0..n)
            .take_while(|&i| qr.r[(i, i)].abs() > RANK_TOL * scale)
            .count();
        assert!(
            rank == n,
            "over-determined equality system must have full column rank"
        );
        let qtf = qr.q.tr_matvec(&p.eq_rhs);
        let mut x0 = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = qtf[i];
            for j in i + 1..n {
                s -= qr.r[(i, j)] * x0[j];
            }
            x0[i] = s / qr.r[(i, i)];
        }
        let feas_scale = norm_inf(&p.eq_rhs).max(1.0);
        for v in &qtf[n..] {
            if v.abs() > tol.max(1e-10) * feas_scale {
                return Err(BatchError::Infeasible);
            }
        }
        (x0, Mat::zeros(n, 0))
    } else {
        // E = R^T Q^T from the QR of E^T; solve R^T w = f by forward
        // substitution over the leading full-rank block, treat the rest as
        // consistency conditions, and keep the trailing Q columns as the
        // null-space basis.
        let qr = crate::linalg::qr(&p.eq_mat.transpose());
        let rmax = n.min(k);
        let scale = (0..rmax)
            .map(|i| qr.r[(i, i)].abs())
            .fold(0.0f64, f64::max)
            .max(1.0);
        let rank = (0..rmax)
            .take_while(|&i| qr.r[(i, i)].abs() > RANK_TOL * scale)
            .count();
        let mut w = vec![0.0; n];
        let feas_scale = norm_inf(&p.eq_rhs).max(1.0);
        for i in 0..k {
            let bound = i.min(rank);
            let mut s = p.eq_rhs[i];
            for j in 0..bound {
                s -= qr.r[(j, i)] * w[j];
            }
            if i < rank {
                w[i] = s / qr.r[(i, i)];
            } else if s.abs() > tol.max(1e-10) * feas_scale {
                return Err(BatchError::Infeasible);
            }
        }
        let x0 = qr.q.matvec(&w);
        let z_basis = qr.q.block(0, rank, n, n - rank);
        (x0, z_basis)
    };

    let hz = p.h_mat.matmul(&z_basis);
    let q_mat = z_basis.tr_matmul(&hz);
    let mut hx0 = p.h_mat.matvec(&x0);
    for (v, g) in hx0.iter_mut().zip(&p.g) {
        *v = 2.0 * *v + g;
    }
    let c = z_basis.tr_matvec(&hx0);
    let a_mat = p.ineq_mat.matmul(&z_basis);
    let gx0 = p.ineq_mat.matvec(&x0);
    let b: Vec<f64> = p.ineq_rhs.iter().zip(&gx0).map(|(h, v)| h - v).collect();
    Ok(ReducedQp {
        x0,
        z_basis,
        q_mat,
        c,
        a_mat,
        b,
    })
}

/// Exhaustive active-set enumeration, exact for a handful of inequalities.
fn solve_by_enumeration(r: &ReducedQp, tol: f64) -> Result<Vec<f64>, BatchError> {
    let n = r.q_mat.rows();
    let m = r.a_mat.rows();
    let feas_scale = norm_inf(&r.b).max(1.0);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
        let dim = n + active.len();
        let mut kkt = Mat::zeros(dim, dim);
        let mut rhs = vec![0.0; dim];
        for i in 0..n {
            for j in 0..n {
                kkt.row_mut(i)[j] = 2.0 * r.q_mat[(i, j)];
            }
            rhs[i] = -r.c[i];
        }
        for (s, &row) in active.iter().enumerate() {
            for j in 0..n {
                kkt.row_mut(j)[n + s] = r.a_mat[(row, j)];
                kkt.row_mut(n + s)[j] = r.a_mat[(row, j)];
            }
            rhs[n + s] = r.b[row];
        }
        let Some(lu) = Lu::new(&kkt) else {
            continue;
        };
        let sol = lu.solve(&rhs);
        let u = &sol[..n];
        let nu = &sol[n..];
        if nu.iter().any(|&v| v < -tol) {
            continue;
        }
        let au = r.a_mat.matvec(u);
        if au
            .iter()
            .zip(&r.b)
            .any(|(lhs, rhs)| *lhs > rhs + tol * feas_scale)
        {
            continue;
        }
        let obj = dot(&r.q_mat.matvec(u), u) + dot(&r.c, u);
        if best.as_ref().map_or(true, |(b, _)| obj < *b) {
            best = Some((obj, u.to_vec()));
        }
    }
    match best {
        Some((_, u)) => Ok(u),
        None => Err(BatchError::Infeasible),
    }
}

/// Primal-dual path-following interior point on the reduced problem.
fn solve_by_interior_point(r: &ReducedQp, tol: f64) -> Result<Vec<f64>, BatchError> {
    const SIGMA: f64 = 0.1;
    const MAX_ITERS: usize = 200;
    const BOUNDARY_FRACTION: f64 = 0.99;
    let n = r.q_mat.rows();
    let m = r.a_mat.rows();
    if m == 0 {
        // No inequalities left: plain SPD solve with a tiny ridge if the
        // reduced curvature is singular along free directions.
        let mut q2 = r.q_mat.scale(2.0);
        let chol = Cholesky::new(&q2).or_else(|| {
            let ridge = 1e-10 * (q2.trace().abs() / n as f64).max(1.0);
            for i in 0..n {
                q2.row_mut(i)[i] += ridge;
            }
            Cholesky::new(&q2)
        });
        let neg_c: Vec<f64> = r.c.iter().map(|v| -v).collect();
        return match chol {
            Some(ch) => Ok(ch.solve(&neg_c)),
            None => Err(BatchError::Infeasible),
        };
    }

    let mut u = vec![0.0; n];
    let au0 = r.a_mat.matvec(&u);
    let mut s: Vec<f64> = r.b.iter().zip(&au0).map(|(b, a)| (b - a).max(1.0)).collect();
    let mut z = vec![1.0; m];
    let c_scale = norm_inf(&r.c).max(1.0);
    let b_scale = norm_inf(&r.b).max(1.0);

    for _ in 0..MAX_ITERS {
        let au = r.a_mat.matvec(&u);
        // r_d = 2 Q u + c + A^T z; r_p = A u + s - b.
        let mut r_d = r.q_mat.matvec(&u);
        for v in r_d.iter_mut() {
            *v *= 2.0;
        }
        for (v, c) in r_d.iter_mut().zip(&r.c) {
            *v += c;
        }
        let atz = r.a_mat.tr_matvec(&z);
        for (v, a) in r_d.iter_mut().zip(&atz) {
            *v += a;
        }
        let r_p: Vec<f64> = (0..m).map(|i| au[i] + s[i] - r.b[i]).collect();
        let mu = dot(&s, &z) / m as f64;
        if norm_inf(&r_d) <= tol * c_scale && norm_inf(&r_p) <= tol * b_scale && mu <= tol {
            return Ok(u);
        }

        // Eliminate ds and dz:
        //   (2Q + A^T (Z/S) A) du = -r_d - A^T S^{-1} (Z r_p - r_c)
        // with r_c = S Z e - sigma mu e.
        let target = SIGMA * mu;
        let mut k_mat = r.q_mat.scale(2.0);
        for i in 0..m {
            let w = z[i] / s[i];
            let row = r.a_mat.row(i);
            for p in 0..n {
                let wp = w * row[p];
                for q in 0..n {
                    k_mat.row_mut(p)[q] += wp * row[q];
                }
            }
        }
        let mut rhs = vec![0.0; n];
        for i in 0..m {
            let rc = s[i] * z[i] - target;
            let coeff = (z[i] * r_p[i] - rc) / s[i];
            for (p, a) in rhs.iter_mut().zip(r.a_mat.row(i)) {
                *p -= a * coeff;
            }
        }
        for (p, d) in rhs.iter_mut().zip(&r_d) {
            *p -= d;
        }
        let chol = match Cholesky::new(&k_mat) {
            Some(ch) => ch,
            None => {
                let ridge = 1e-12 * (k_mat.trace().abs() / n as f64).max(1.0);
                for i in 0..n {
                    k_mat.row_mut(i)[i] += ridge;
                }
                Cholesky::new(&k_mat).ok_or(BatchError::Infeasible)?
            }
        };
        let du = chol.solve(&rhs);
        let adu = r.a_mat.matvec(&du);
        let ds: Vec<f64> = (0..m).map(|i| -r_p[i] - adu[i]).collect();
        let dz: Vec<f64> = (0..m)
            .map(|i| -(s[i] * z[i] - target + z[i] * ds[i]) / s[i])
            .collect();

        let mut alpha_p = 1.0f64;
        for i in 0..m {
            if ds[i] < 0.0 {
                alpha_p = alpha_p.min(-BOUNDARY_FRACTION * s[i] / ds[i]);
            }
        }
        let mut alpha_d = 1.0f64;
        for i in 0..m {
            if dz[i] < 0.0 {
                alpha_d = alpha_d.min(-BOUNDARY_FRACTION * z[i] / dz[i]);
            }
        }
        for (v, d) in u.iter_mut().zip(&du) {
            *v += alpha_p * d;
        }
        for (v, d) in s.iter_mut().zip(&ds) {
            *v += alpha_p * d;
        }
        for (v, d) in z.iter_mut().zip(&dz) {
            *v += alpha_d * d;
        }
    }
    Err(BatchError::MaxIterations(MAX_ITERS))
}

/// Inequality count up to which exhaustive active-set enumeration is exact
/// and cheaper than iterating.
const ENUMERATION_LIMIT: usize = 8;

/// Solves the program to KKT residuals below `tol`.
pub fn qp_solve(p: &DenseQp, tol: f64) -> Result<Vec<f64>, BatchError> {
    let reduced = eliminate_equalities(p, tol)?;
    let u = if reduced.a_mat.rows() <= ENUMERATION_LIMIT {
        solve_by_enumeration(&reduced, tol)?
    } else {
        solve_by_interior_point(&reduced, tol)?
    };
    let zu = reduced.z_basis.matvec(&u);
    Ok(reduced
        .x0
        .iter()
        .zip(&zu)
        .map(|(a, b)| a + b)
        .collect())
}

/// Jointly minimizes total curvature over all sections subject to
/// continuity at every knot and the interval constraints, with the first
/// section's low-order coefficients free.
///
/// This is the non-causal baseline: no streaming policy can do better on
/// the same sequence. Intervals with zero half-width become equality rows.
pub fn batch_interpolate(
    seq: &IntervalSequence,
    cfg: SplineConfig,
) -> Result<ReconstructionResult, BatchError> {
    let n = seq.len();
    if n < 2 {
        return Err(BatchError::Core(crate::core::CoreError::EmptySequence));
    }
    let sections = n - 1;
    let width = cfg.coeff_count();
    let vars = sections * width;
    let items = seq.as_slice();

    let mut h_mat = Mat::zeros(vars, vars);
    let mut curvatures = Vec::with_capacity(sections);
    for t in 0..sections {
        let u = items[t + 1].x - items[t].x;
        let m = curvature_matrix(u, cfg.d()).expect("validated sequence has positive gaps");
        h_mat.set_block(t * width, t * width, m.mat());
        curvatures.push(m);
    }
    let mut qp = DenseQp::new(h_mat, vec![0.0; vars]);

    // Continuity at interior knots: the next head equals the reach of the
    // previous section, one row per matched derivative order.
    for t in 0..sections - 1 {
        let u = items[t + 1].x - items[t].x;
        for q in 0..=cfg.phi() {
            let reach = crate::splinalg::basis_derivative(u, 0.0, cfg.d(), q);
            let mut row = vec![0.0; vars];
            let fact: f64 = (1..=q).product::<usize>() as f64;
            for (m, r) in reach.iter().enumerate() {
                row[t * width + m] = r / fact;
            }
            row[(t + 1) * width + q] = -1.0;
            qp.push_equality(&row, 0.0);
        }
    }

    // Interval constraints: knot 0 against the first section at offset
    // zero, every later knot against the section that ends there.
    for t in 0..n {
        let (sec, tau) = if t == 0 {
            (0, 0.0)
        } else {
            (t - 1, items[t].x - items[t - 1].x)
        };
        let basis = basis_vector(tau, 0.0, cfg.d());
        let mut row = vec![0.0; vars];
        row[sec * width..sec * width + width].copy_from_slice(&basis);
        if items[t].eps == 0.0 {
            qp.push_equality(&row, items[t].y);
        } else {
            qp.push_inequality(&row, items[t].y + items[t].eps);
            let neg: Vec<f64> = row.iter().map(|v| -v).collect();
            qp.push_inequality(&neg, -(items[t].y - items[t].eps));
        }
    }

    let x = qp_solve(&qp, 1e-8)?;

    // Rebuild with exact continuity: keep the optimized free coefficients
    // and recompute each head from the previous section, absorbing the
    // solver's residual feasibility error.
    let knots: Vec<f64> = items.iter().map(|i| i.x).collect();
    let e0 = x[..cfg.head_len()].to_vec();
    let tails: Vec<Vec<f64>> = (0..sections)
        .map(|t| x[t * width + cfg.head_len()..(t + 1) * width].to_vec())
        .collect();
    let spline = assemble_smooth_spline(cfg, &knots, &e0, &tails)?;
    let section_curvatures: Vec<f64> = spline
        .sections()
        .iter()
        .zip(&curvatures)
        .map(|(a, m)| section_curvature(a, m))
        .collect();
    let loss = section_curvatures.iter().sum::<f64>() / sections as f64;
    Ok(ReconstructionResult {
        spline,
        section_curvatures,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::Interval;
    use crate::policy::{
        assemble_cost, hyperslab_project, reduce_to_slab, ParametrizedParams, PolicyParams,
        SlabProblem,
    };
    use crate::core::RtiState;
    use crate::rti::reconstruct;
    use crate::splinalg::spline_eval;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(points: &[(f64, f64, f64)]) -> IntervalSequence {
        IntervalSequence::new(
            points
                .iter()
                .map(|&(x, y, eps)| Interval::new(x, y, eps))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn unconstrained_identity_quadratic() {
        let qp = DenseQp::new(Mat::identity(3), vec![-2.0; 3]);
        let x = qp_solve(&qp, 1e-8).unwrap();
        for v in x {
            assert_relative_eq!(v, 1.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn one_dimensional_box_hits_the_bound() {
        // minimize (x - 2)^2 subject to x <= 1.
        let mut qp = DenseQp::new(Mat::identity(1), vec![-4.0]);
        qp.push_inequality(&[1.0], 1.0);
        let x = qp_solve(&qp, 1e-8).unwrap();
        assert_relative_eq!(x[0], 1.0, max_relative = 1e-9);
    }

    #[test]
    fn contradictory_equalities_are_infeasible() {
        let mut qp = DenseQp::new(Mat::identity(1), vec![0.0]);
        qp.push_equality(&[1.0], 0.0);
        qp.push_equality(&[1.0], 1.0);
        assert!(matches!(qp_solve(&qp, 1e-8), Err(BatchError::Infeasible)));
    }

    #[test]
    fn equality_reduction_solves_constrained_least_squares() {
        // minimize ||x||^2 subject to x0 + x1 = 2, x1 - x2 = 0
        // has the symmetric solution (1.2, 0.8, 0.8)? No: minimize
        // x0^2+x1^2+x2^2 with x0 = 2 - x1, x2 = x1 gives
        // (2-x1)^2 + 2 x1^2, minimized at x1 = 2/3: x = (4/3, 2/3, 2/3).
        let mut qp = DenseQp::new(Mat::identity(3), vec![0.0; 3]);
        qp.push_equality(&[1.0, 1.0, 0.0], 2.0);
        qp.push_equality(&[0.0, 1.0, -1.0], 0.0);
        let x = qp_solve(&qp, 1e-8).unwrap();
        assert_relative_eq!(x[0], 4.0 / 3.0, max_relative = 1e-9);
        assert_relative_eq!(x[1], 2.0 / 3.0, max_relative = 1e-9);
        assert_relative_eq!(x[2], 2.0 / 3.0, max_relative = 1e-9);
    }

    fn random_slab(rng: &mut ChaCha8Rng) -> SlabProblem {
        let d = rng.gen_range(3..=5);
        let phi = rng.gen_range(1..d.min(3));
        let cfg = SplineConfig::new(d, phi).unwrap();
        let u = rng.gen_range(0.3..2.0);
        let m = curvature_matrix(u, d).unwrap();
        let params = if rng.gen_bool(0.5) {
            PolicyParams::Myopic
        } else {
            PolicyParams::Parametrized(ParametrizedParams {
                mu: rng.gen_range(-0.3..0.3),
                gamma_raw: rng.gen_range(-0.3..0.3),
                lambda_raw: rng.gen_range(-3.0..-1.0),
            })
        };
        let cost = assemble_cost(&m, cfg, &params, None).unwrap();
        let e: Vec<f64> = (0..cfg.head_len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let state = RtiState::new(
            Interval::new(u, rng.gen_range(-1.5..1.5), rng.gen_range(0.0..0.5)),
            crate::core::SignalState::new(cfg, 0.0, e).unwrap(),
        )
        .unwrap();
        reduce_to_slab(&cost, &state, cfg).unwrap()
    }

    #[test]
    fn qp_matches_closed_form_slab_projection() {
        // Bidirectional oracle: the closed form and the generic QP must
        // agree on the same random instances.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..400 {
            let slab = random_slab(&mut rng);
            let alpha = hyperslab_project(&slab);
            let dim = slab.q().len();
            let g: Vec<f64> = slab
                .d_mat()
                .matvec(slab.o())
                .iter()
                .map(|v| -2.0 * v)
                .collect();
            let mut qp = DenseQp::new(slab.d_mat().clone(), g);
            qp.push_inequality(slab.q(), slab.z() + slab.eps());
            let neg: Vec<f64> = slab.q().iter().map(|v| -v).collect();
            qp.push_inequality(&neg, -(slab.z() - slab.eps()));
            let x = qp_solve(&qp, 1e-10).unwrap();
            let scale = norm_inf(&alpha).max(1.0);
            for k in 0..dim {
                assert!(
                    (x[k] - alpha[k]).abs() <= 1e-7 * scale,
                    "entry {k}: qp {} vs closed form {}",
                    x[k],
                    alpha[k]
                );
            }
        }
    }

    #[test]
    fn two_intervals_cost_nothing() {
        let s = seq(&[(0.0, 0.3, 0.1), (1.4, -0.7, 0.1)]);
        let r = batch_interpolate(&s, SplineConfig::new(3, 2).unwrap()).unwrap();
        assert!(r.loss.abs() < 1e-12, "loss {}", r.loss);
    }

    #[test]
    fn collinear_slabs_admit_a_straight_line() {
        let s = seq(&[
            (0.0, 0.0, 0.05),
            (1.0, 0.5, 0.05),
            (2.5, 1.25, 0.05),
            (4.0, 2.0, 0.05),
            (5.0, 2.5, 0.05),
        ]);
        let r = batch_interpolate(&s, SplineConfig::new(3, 2).unwrap()).unwrap();
        assert!(r.loss.abs() < 1e-10, "loss {}", r.loss);
        for a in r.spline.sections() {
            assert!(a.coeffs()[2].abs() < 1e-5 && a.coeffs()[3].abs() < 1e-5);
        }
    }

    #[test]
    fn exact_interpolation_has_natural_boundary() {
        // With zero half-widths the joint minimizer is the classic natural
        // spline: second derivative vanishes at both outer knots.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SplineConfig::new(3, 2).unwrap();
        for _ in 0..5 {
            let mut x = 0.0;
            let mut pts = Vec::new();
            for _ in 0..7 {
                pts.push((x, rng.gen_range(-1.0..1.0), 0.0));
                x += rng.gen_range(0.5..1.5);
            }
            let s = seq(&pts);
            let r = batch_interpolate(&s, cfg).unwrap();
            let first = r.spline.sections().first().unwrap().coeffs();
            let last = r.spline.sections().last().unwrap().coeffs();
            let u_last = {
                let k = r.spline.knots();
                k[k.len() - 1] - k[k.len() - 2]
            };
            let start_dd = 2.0 * first[2];
            let end_dd = 2.0 * last[2] + 6.0 * last[3] * u_last;
            assert!(start_dd.abs() < 1e-6, "f'' at start {start_dd}");
            assert!(end_dd.abs() < 1e-6, "f'' at end {end_dd}");
            // And the fit is exact at every knot.
            for t in 0..s.len() {
                let f = spline_eval(&r.spline, s[t].x, 0).unwrap();
                assert!((f - s[t].y).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn widening_slabs_never_costs_more() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let cfg = SplineConfig::new(3, 2).unwrap();
        for _ in 0..4 {
            let mut x = 0.0;
            let mut pts = Vec::new();
            for _ in 0..10 {
                pts.push((x, rng.gen_range(-1.0..1.0), rng.gen_range(0.02..0.2)));
                x += rng.gen_range(0.5..1.5);
            }
            let narrow = batch_interpolate(&seq(&pts), cfg).unwrap();
            let wide_pts: Vec<(f64, f64, f64)> =
                pts.iter().map(|&(x, y, e)| (x, y, 2.0 * e)).collect();
            let wide = batch_interpolate(&seq(&wide_pts), cfg).unwrap();
            assert!(
                wide.loss <= narrow.loss + 1e-9,
                "wide {} vs narrow {}",
                wide.loss,
                narrow.loss
            );
        }
    }

    #[test]
    fn batch_is_a_lower_bound_for_streaming() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cfg = SplineConfig::new(3, 2).unwrap();
        for _ in 0..4 {
            let mut x = 0.0;
            let mut pts = Vec::new();
            for _ in 0..12 {
                pts.push((x, rng.gen_range(-1.0..1.0), rng.gen_range(0.05..0.3)));
                x += rng.gen_range(0.5..1.5);
            }
            let s = seq(&pts);
            let batch = batch_interpolate(&s, cfg).unwrap();
            let myopic = reconstruct(&s, cfg, &PolicyParams::Myopic, None).unwrap();
            assert!(
                batch.loss <= myopic.loss + 1e-9,
                "batch {} vs myopic {}",
                batch.loss,
                myopic.loss
            );
        }
    }

    #[test]
    fn batch_solution_is_consistent_and_smooth() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let cfg = SplineConfig::new(3, 2).unwrap();
        let mut x = 0.0;
        let mut pts = Vec::new();
        for _ in 0..15 {
            pts.push((x, rng.gen_range(-1.0..1.0), rng.gen_range(0.05..0.3)));
            x += rng.gen_range(0.5..1.5);
        }
        let s = seq(&pts);
        let r = batch_interpolate(&s, cfg).unwrap();
        // Spline construction already certifies smoothness; check the data.
        for t in 0..s.len() {
            let f = spline_eval(&r.spline, s[t].x, 0).unwrap();
            assert!(
                (f - s[t].y).abs() <= s[t].eps + 1e-6,
                "t={t}: |{f} - {}| > {} + 1e-6",
                s[t].y,
                s[t].eps
            );
        }
    }
}
