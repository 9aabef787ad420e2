//! Tape-based reverse-mode differentiation over matrices.
//!
//! A [`Tape`] records every primitive operation performed during one forward
//! pass; [`Tape::backward`] then walks the record in reverse, accumulating
//! adjoints. The op set is deliberately small: exactly what the unrolled
//! interpolator needs (dense linear algebra, an SPD solve for the slab
//! reduction, GRU nonlinearities, and vector plumbing).
//!
//! Values are dense row-major matrices ([`Mat`]); scalars are 1x1 and column
//! vectors are n x 1. Branching control flow is resolved while the tape is
//! being built, so a piecewise construct differentiates the branch that was
//! actually taken.

use crate::linalg::{Cholesky, Mat};
use thiserror::Error;

/// Errors from taped operations and the backward pass.
#[derive(Debug, Error)]
pub enum AutodiffError {
    /// The left operand of a [`Tape::solve_spd`] call had no Cholesky
    /// factorization with strictly positive pivots.
    #[error("solve_spd: matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    /// [`Tape::backward`] requires a 1x1 output to seed the sweep.
    #[error("backward: output must be a scalar, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
}

/// Handle to a value recorded on a [`Tape`].
///
/// Copyable and cheap; it is only meaningful together with the tape that
/// produced it. Using a handle with a different tape panics or returns
/// nonsense shapes, the same failure mode as indexing the wrong vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DualValue {
    id: usize,
}

enum Op {
    /// Trainable input; receives a gradient.
    Leaf,
    /// Fixed input; no gradient is accumulated.
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    /// Elementwise product.
    Mul(usize, usize),
    /// 1x1 scalar times tensor.
    ScalarMul(usize, usize),
    /// Column-vector inner product, result 1x1.
    Dot(usize, usize),
    MatVec(usize, usize),
    MatMat(usize, usize),
    /// x = A^{-1} b with the forward factorization retained for the
    /// adjoint solve.
    SolveSpd {
        a: usize,
        b: usize,
        chol: Cholesky,
    },
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Recip(usize),
    /// Stack column vectors top to bottom.
    Concat(Vec<usize>),
    /// Contiguous rows of a column vector.
    Slice {
        v: usize,
        start: usize,
    },
    /// Rectangular sub-block of a matrix.
    Block {
        m: usize,
        r0: usize,
        c0: usize,
    },
    /// Assemble a matrix from 1x1 entries in row-major order.
    Gather(Vec<usize>),
    /// Piecewise choice resolved at build time; forwards the taken branch.
    Select(usize),
}

struct Node {
    op: Op,
    value: Mat,
}

/// Append-only record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`DualValue`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the swept output with respect to `v`.
    ///
    /// Values the output does not depend on get a zero gradient of the
    /// right shape.
    pub fn wrt(&self, v: DualValue) -> Mat {
        match &self.adjoints[v.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                Mat::zeros(r, c)
            }
        }
    }
}

fn col(values: &[f64]) -> Mat {
    Mat::from_fn(values.len(), 1, |r, _| values[r])
}

fn same_shape(what: &str, a: &Mat, b: &Mat) {
    assert!(
        a.rows() == b.rows() && a.cols() == b.cols(),
        "shape mismatch: {what} on {}x{} and {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    );
}

fn scalar_of(m: &Mat) -> f64 {
    assert!(
        m.rows() == 1 && m.cols() == 1,
        "expected 1x1 scalar, got {}x{}",
        m.rows(),
        m.cols()
    );
    m.data()[0]
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a recorded node.
    pub fn value(&self, v: DualValue) -> &Mat {
        &self.nodes[v.id].value
    }

    fn push(&mut self, op: Op, value: Mat) -> DualValue {
        self.nodes.push(Node { op, value });
        DualValue {
            id: self.nodes.len() - 1,
        }
    }

    /// Trainable matrix input.
    pub fn leaf(&mut self, value: Mat) -> DualValue {
        self.push(Op::Leaf, value)
    }

    /// Trainable scalar input.
    pub fn leaf_scalar(&mut self, value: f64) -> DualValue {
        self.leaf(col(&[value]))
    }

    /// Trainable column-vector input.
    pub fn leaf_vector(&mut self, values: &[f64]) -> DualValue {
        self.leaf(col(values))
    }

    /// Fixed matrix input; never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> DualValue {
        self.push(Op::Const, value)
    }

    /// Fixed scalar input.
    pub fn constant_scalar(&mut self, value: f64) -> DualValue {
        self.constant(col(&[value]))
    }

    /// Fixed column-vector input.
    pub fn constant_vector(&mut self, values: &[f64]) -> DualValue {
        self.constant(col(values))
    }

    pub fn add(&mut self, a: DualValue, b: DualValue) -> DualValue {
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        same_shape("add", va, vb);
        let value = va.add(vb);
        self.push(Op::Add(a.id, b.id), value)
    }

    pub fn sub(&mut self, a: DualValue, b: DualValue) -> DualValue {
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        same_shape("sub", va, vb);
        let value = va.add(&vb.scale(-1.0));
        self.push(Op::Sub(a.id, b.id), value)
    }

    pub fn neg(&mut self, a: DualValue) -> DualValue {
        let value = self.nodes[a.id].value.scale(-1.0);
        self.push(Op::Neg(a.id), value)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: DualValue, b: DualValue) -> DualValue {
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        same_shape("mul", va, vb);
        let value = Mat::from_fn(va.rows(), va.cols(), |r, c| va[(r, c)] * vb[(r, c)]);
        self.push(Op::Mul(a.id, b.id), value)
    }

    /// Product of a 1x1 scalar and a tensor.
    pub fn scalar_mul(&mut self, s: DualValue, a: DualValue) -> DualValue {
        let sv = scalar_of(&self.nodes[s.id].value);
        let value = self.nodes[a.id].value.scale(sv);
        self.push(Op::ScalarMul(s.id, a.id), value)
    }

    /// Inner product of two column vectors, result 1x1.
    pub fn dot(&mut self, a: DualValue, b: DualValue) -> DualValue {
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        same_shape("dot", va, vb);
        assert!(
            va.cols() == 1,
            "dot expects column vectors, got {}x{}",
            va.rows(),
            va.cols()
        );
        let value = crate::linalg::dot(va.data(), vb.data());
        self.push(Op::Dot(a.id, b.id), col(&[value]))
    }

    /// Matrix times column vector.
    pub fn matvec(&mut self, m: DualValue, v: DualValue) -> DualValue {
        let (mm, vv) = (&self.nodes[m.id].value, &self.nodes[v.id].value);
        assert!(
            vv.cols() == 1 && mm.cols() == vv.rows(),
            "shape mismatch: matvec on {}x{} and {}x{}",
            mm.rows(),
            mm.cols(),
            vv.rows(),
            vv.cols()
        );
        let value = col(&mm.matvec(vv.data()));
        self.push(Op::MatVec(m.id, v.id), value)
    }

    /// Matrix product.
    pub fn matmat(&mut self, a: DualValue, b: DualValue) -> DualValue {
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        assert!(
            va.cols() == vb.rows(),
            "shape mismatch: matmat on {}x{} and {}x{}",
            va.rows(),
            va.cols(),
            vb.rows(),
            vb.cols()
        );
        let value = va.matmul(vb);
        self.push(Op::MatMat(a.id, b.id), value)
    }

    /// `x = A^{-1} b` for symmetric positive definite `A` and column `b`.
    ///
    /// Only the lower triangle of `A` is read (the factorization mirrors
    /// it), and the adjoint is reported with the same dependence: zero
    /// above the diagonal, with off-diagonal sensitivity accumulated into
    /// the lower entry. The Cholesky factorization from the forward pass
    /// is retained and reused to solve the adjoint system in the backward
    /// sweep (the implicit-function rule with `w = A^{-1} x_adj`:
    /// `b_adj += w`, `A_adj -= w x^T` mirrored onto the lower triangle).
    pub fn solve_spd(&mut self, a: DualValue, b: DualValue) -> Result<DualValue, AutodiffError> {
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        assert!(
            va.rows() == va.cols() && vb.cols() == 1 && va.rows() == vb.rows(),
            "shape mismatch: solve_spd on {}x{} and {}x{}",
            va.rows(),
            va.cols(),
            vb.rows(),
            vb.cols()
        );
        let chol = Cholesky::new(va).ok_or(AutodiffError::NotPositiveDefinite)?;
        let value = col(&chol.solve(vb.data()));
        Ok(self.push(
            Op::SolveSpd {
                a: a.id,
                b: b.id,
                chol,
            },
            value,
        ))
    }

    fn unary(&mut self, a: DualValue, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> DualValue {
        let va = &self.nodes[a.id].value;
        let value = Mat::from_fn(va.rows(), va.cols(), |r, c| f(va[(r, c)]));
        self.push(op(a.id), value)
    }

    /// Elementwise logistic function.
    pub fn sigmoid(&mut self, a: DualValue) -> DualValue {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(&mut self, a: DualValue) -> DualValue {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    /// Elementwise exponential.
    pub fn exp(&mut self, a: DualValue) -> DualValue {
        self.unary(a, f64::exp, Op::Exp)
    }

    /// Elementwise reciprocal.
    pub fn reciprocal(&mut self, a: DualValue) -> DualValue {
        self.unary(a, |x| 1.0 / x, Op::Recip)
    }

    /// Stack column vectors top to bottom.
    pub fn concat(&mut self, parts: &[DualValue]) -> DualValue {
        assert!(!parts.is_empty(), "concat of zero vectors");
        let mut data = Vec::new();
        for p in parts {
            let v = &self.nodes[p.id].value;
            assert!(
                v.cols() == 1,
                "concat expects column vectors, got {}x{}",
                v.rows(),
                v.cols()
            );
            data.extend_from_slice(v.data());
        }
        let value = col(&data);
        self.push(Op::Concat(parts.iter().map(|p| p.id).collect()), value)
    }

    /// Rows `start .. start + len` of a column vector.
    pub fn slice(&mut self, v: DualValue, start: usize, len: usize) -> DualValue {
        let vv = &self.nodes[v.id].value;
        assert!(
            vv.cols() == 1 && start + len <= vv.rows(),
            "slice {start}..{} out of bounds for {}x{}",
            start + len,
            vv.rows(),
            vv.cols()
        );
        let value = col(&vv.data()[start..start + len]);
        self.push(Op::Slice { v: v.id, start }, value)
    }

    /// Rectangular sub-block of a matrix.
    pub fn block(&mut self, m: DualValue, r0: usize, c0: usize, rows: usize, cols: usize) -> DualValue {
        let mm = &self.nodes[m.id].value;
        assert!(
            r0 + rows <= mm.rows() && c0 + cols <= mm.cols(),
            "block ({r0},{c0})+{rows}x{cols} out of bounds for {}x{}",
            mm.rows(),
            mm.cols()
        );
        let value = mm.block(r0, c0, rows, cols);
        self.push(Op::Block { m: m.id, r0, c0 }, value)
    }

    /// Assemble a `rows x cols` matrix from 1x1 entries in row-major order.
    pub fn gather(&mut self, entries: &[DualValue], rows: usize, cols: usize) -> DualValue {
        assert!(
            entries.len() == rows * cols,
            "gather of {} entries into {rows}x{cols}",
            entries.len()
        );
        let data: Vec<f64> = entries
            .iter()
            .map(|e| scalar_of(&self.nodes[e.id].value))
            .collect();
        let value = Mat::from_fn(rows, cols, |r, c| data[r * cols + c]);
        self.push(Op::Gather(entries.iter().map(|e| e.id).collect()), value)
    }

    /// Piecewise choice. The branch condition is a plain boolean fixed at
    /// build time, so the backward sweep differentiates the branch that was
    /// taken; at a branch boundary that is the caller's active-branch
    /// subgradient choice.
    pub fn select(&mut self, take_first: bool, a: DualValue, b: DualValue) -> DualValue {
        let taken = if take_first { a } else { b };
        let value = self.nodes[taken.id].value.clone();
        self.push(Op::Select(taken.id), value)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: DualValue) -> Result<Gradients, AutodiffError> {
        let out = &self.nodes[output.id].value;
        if out.rows() != 1 || out.cols() != 1 {
            return Err(AutodiffError::NonScalarOutput {
                rows: out.rows(),
                cols: out.cols(),
            });
        }
        let mut adjoints: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        adjoints[output.id] = Some(col(&[1.0]));
        for id in (0..=output.id).rev() {
            let Some(g) = adjoints[id].take() else {
                continue;
            };
            self.pull(id, &g, &mut adjoints);
            adjoints[id] = Some(g);
        }
        Ok(Gradients {
            shapes: self
                .nodes
                .iter()
                .map(|n| (n.value.rows(), n.value.cols()))
                .collect(),
            adjoints,
        })
    }

    fn accumulate(&self, adjoints: &mut [Option<Mat>], id: usize, delta: Mat) {
        match &mut adjoints[id] {
            Some(g) => *g = g.add(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn pull(&self, id: usize, g: &Mat, adjoints: &mut [Option<Mat>]) {
        match &self.nodes[id].op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.accumulate(adjoints, *a, g.clone());
                self.accumulate(adjoints, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adjoints, *a, g.clone());
                self.accumulate(adjoints, *b, g.scale(-1.0));
            }
            Op::Neg(a) => self.accumulate(adjoints, *a, g.scale(-1.0)),
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da = Mat::from_fn(g.rows(), g.cols(), |r, c| g[(r, c)] * vb[(r, c)]);
                let db = Mat::from_fn(g.rows(), g.cols(), |r, c| g[(r, c)] * va[(r, c)]);
                self.accumulate(adjoints, *a, da);
                self.accumulate(adjoints, *b, db);
            }
            Op::ScalarMul(s, a) => {
                let (vs, va) = (&self.nodes[*s].value, &self.nodes[*a].value);
                let ds = crate::linalg::dot(g.data(), va.data());
                self.accumulate(adjoints, *s, col(&[ds]));
                self.accumulate(adjoints, *a, g.scale(scalar_of(vs)));
            }
            Op::Dot(a, b) => {
                let gs = scalar_of(g);
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.accumulate(adjoints, *a, vb.scale(gs));
                self.accumulate(adjoints, *b, va.scale(gs));
            }
            Op::MatVec(m, v) => {
                let (vm, vv) = (&self.nodes[*m].value, &self.nodes[*v].value);
                let dm = Mat::from_fn(vm.rows(), vm.cols(), |r, c| g.data()[r] * vv.data()[c]);
                let dv = col(&vm.tr_matvec(g.data()));
                self.accumulate(adjoints, *m, dm);
                self.accumulate(adjoints, *v, dv);
            }
            Op::MatMat(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da = g.matmul(&vb.transpose());
                let db = va.tr_matmul(g);
                self.accumulate(adjoints, *a, da);
                self.accumulate(adjoints, *b, db);
            }
            Op::SolveSpd { a, b, chol } => {
                let x = &self.nodes[id].value;
                let w = chol.solve(g.data());
                let da = Mat::from_fn(x.rows(), x.rows(), |r, c| match r.cmp(&c) {
                    std::cmp::Ordering::Equal => -w[r] * x.data()[r],
                    std::cmp::Ordering::Greater => -(w[r] * x.data()[c] + w[c] * x.data()[r]),
                    std::cmp::Ordering::Less => 0.0,
                });
                self.accumulate(adjoints, *a, da);
                self.accumulate(adjoints, *b, col(&w));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let da = Mat::from_fn(g.rows(), g.cols(), |r, c| {
                    g[(r, c)] * y[(r, c)] * (1.0 - y[(r, c)])
                });
                self.accumulate(adjoints, *a, da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let da = Mat::from_fn(g.rows(), g.cols(), |r, c| {
                    g[(r, c)] * (1.0 - y[(r, c)] * y[(r, c)])
                });
                self.accumulate(adjoints, *a, da);
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                let da = Mat::from_fn(g.rows(), g.cols(), |r, c| g[(r, c)] * y[(r, c)]);
                self.accumulate(adjoints, *a, da);
            }
            Op::Recip(a) => {
                let y = &self.nodes[id].value;
                let da = Mat::from_fn(g.rows(), g.cols(), |r, c| {
                    -g[(r, c)] * y[(r, c)] * y[(r, c)]
                });
                self.accumulate(adjoints, *a, da);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = self.nodes[*p].value.rows();
                    self.accumulate(adjoints, *p, col(&g.data()[start..start + len]));
                    start += len;
                }
            }
            Op::Slice { v, start } => {
                let vv = &self.nodes[*v].value;
                let mut dv = Mat::zeros(vv.rows(), 1);
                for (k, gv) in g.data().iter().enumerate() {
                    dv.row_mut(start + k)[0] = *gv;
                }
                self.accumulate(adjoints, *v, dv);
            }
            Op::Block { m, r0, c0 } => {
                let vm = &self.nodes[*m].value;
                let mut dm = Mat::zeros(vm.rows(), vm.cols());
                dm.set_block(*r0, *c0, g);
                self.accumulate(adjoints, *m, dm);
            }
            Op::Gather(entries) => {
                for (k, e) in entries.iter().enumerate() {
                    self.accumulate(adjoints, *e, col(&[g.data()[k]]));
                }
            }
            Op::Select(taken) => self.accumulate(adjoints, *taken, g.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf_scalar(1.7);
        let g = tape.backward(x).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0]);
    }

    #[test]
    fn product_rule_at_two_three() {
        let mut tape = Tape::new();
        let x = tape.leaf_scalar(2.0);
        let y = tape.leaf_scalar(3.0);
        let p = tape.mul(x, y);
        let g = tape.backward(p).unwrap();
        assert_eq!(g.wrt(x).data(), &[3.0]);
        assert_eq!(g.wrt(y).data(), &[2.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut tape = Tape::new();
        let x = tape.leaf_scalar(0.0);
        let s = tape.sigmoid(x);
        let g = tape.backward(s).unwrap();
        assert_relative_eq!(g.wrt(x).data()[0], 0.25, max_relative = 1e-15);
    }

    #[test]
    fn fan_out_accumulates() {
        // f(x) = x*x + x has derivative 2x + 1.
        let mut tape = Tape::new();
        let x = tape.leaf_scalar(1.5);
        let sq = tape.mul(x, x);
        let f = tape.add(sq, x);
        let g = tape.backward(f).unwrap();
        assert_relative_eq!(g.wrt(x).data()[0], 4.0, max_relative = 1e-15);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf_scalar(1.0);
        let unused = tape.leaf_vector(&[1.0, 2.0]);
        let f = tape.mul(x, x);
        let g = tape.backward(f).unwrap();
        let z = g.wrt(unused);
        assert_eq!((z.rows(), z.cols()), (2, 1));
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut tape = Tape::new();
        let v = tape.leaf_vector(&[1.0, 2.0]);
        let err = tape.backward(v).unwrap_err();
        assert!(matches!(
            err,
            AutodiffError::NonScalarOutput { rows: 2, cols: 1 }
        ));
    }

    #[test]
    fn solve_spd_rejects_indefinite_matrix() {
        let mut tape = Tape::new();
        let a = tape.constant(Mat::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]));
        let b = tape.constant_vector(&[1.0, 1.0]);
        assert!(matches!(
            tape.solve_spd(a, b),
            Err(AutodiffError::NotPositiveDefinite)
        ));
    }

    #[test]
    fn select_routes_gradient_to_taken_branch() {
        let mut tape = Tape::new();
        let a = tape.leaf_scalar(2.0);
        let b = tape.leaf_scalar(5.0);
        let picked = tape.select(false, a, b);
        let f = tape.mul(picked, picked);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.wrt(a).data(), &[0.0]);
        assert_eq!(g.wrt(b).data(), &[10.0]);
    }

    /// Central finite difference of `f` in the `k`-th entry of `x0`.
    fn central_diff(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], k: usize, step: f64) -> f64 {
        let mut hi = x0.to_vec();
        let mut lo = x0.to_vec();
        hi[k] += step;
        lo[k] -= step;
        (f(&hi) - f(&lo)) / (2.0 * step)
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Mat {
        let b = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut a = b.tr_matmul(&b);
        for i in 0..n {
            let v = a[(i, i)] + 0.5;
            a.row_mut(i)[i] = v;
        }
        a
    }

    #[test]
    fn solve_norm_gradient_matches_finite_differences() {
        // f(b) = || A^{-1} b ||^2 for fixed SPD A, checked entrywise in b,
        // and f(A) checked entrywise in A.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let n = 4;
            let a0 = random_spd(n, &mut rng);
            let b0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let mut tape = Tape::new();
            let a = tape.leaf(a0.clone());
            let b = tape.leaf_vector(&b0);
            let x = tape.solve_spd(a, b).unwrap();
            let f = tape.dot(x, x);
            let g = tape.backward(f).unwrap();
            let (gb, ga) = (g.wrt(b), g.wrt(a));

            let f_of_b = |bv: &[f64]| {
                let x = Cholesky::new(&a0).unwrap().solve(bv);
                crate::linalg::dot(&x, &x)
            };
            for k in 0..n {
                let fd = central_diff(&f_of_b, &b0, k, 1e-5);
                assert_relative_eq!(gb.data()[k], fd, max_relative = 1e-6);
            }

            let a_flat: Vec<f64> = a0.data().to_vec();
            let f_of_a = |av: &[f64]| {
                let am = Mat::from_fn(n, n, |r, c| av[r * n + c]);
                let x = Cholesky::new(&am).unwrap().solve(&b0);
                crate::linalg::dot(&x, &x)
            };
            for k in 0..n * n {
                let fd = central_diff(&f_of_a, &a_flat, k, 1e-5);
                assert_relative_eq!(ga.data()[k], fd, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn elementwise_chain_matches_finite_differences() {
        // f(x) = sum over elements of tanh(exp(x) * sigmoid(x) + 1/x).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0: Vec<f64> = (0..6).map(|_| rng.gen_range(0.3..1.5)).collect();

        let mut tape = Tape::new();
        let x = tape.leaf_vector(&x0);
        let e = tape.exp(x);
        let s = tape.sigmoid(x);
        let prod = tape.mul(e, s);
        let r = tape.reciprocal(x);
        let inner = tape.add(prod, r);
        let t = tape.tanh(inner);
        let ones = tape.constant_vector(&vec![1.0; x0.len()]);
        let f = tape.dot(t, ones);
        let g = tape.backward(f).unwrap();
        let gx = g.wrt(x);

        let eval = |xv: &[f64]| {
            xv.iter()
                .map(|&v| (v.exp() / (1.0 + (-v).exp()) + 1.0 / v).tanh())
                .sum::<f64>()
        };
        for k in 0..x0.len() {
            let fd = central_diff(&eval, &x0, k, 1e-5);
            assert_relative_eq!(gx.data()[k], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn matrix_plumbing_matches_finite_differences() {
        // f(M, v) = || top half of concat(Mv, w) ||^2 with a sliced and
        // re-gathered scalar mixed in, exercising matvec, matmat, concat,
        // slice, block, and gather together.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m0 = Mat::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let v0: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let build = |tape: &mut Tape, m: DualValue, v: DualValue| {
            let sq = tape.matmat(m, m);
            let mv = tape.matvec(sq, v);
            let joined = tape.concat(&[mv, v]);
            let top = tape.slice(joined, 1, 4);
            let corner = tape.block(m, 0, 0, 2, 1);
            let c0 = tape.slice(corner, 0, 1);
            let c1 = tape.slice(corner, 1, 1);
            let spread = tape.gather(&[c0, c1, c0, c1], 4, 1);
            let mixed = tape.mul(top, spread);
            tape.dot(mixed, mixed)
        };

        let mut tape = Tape::new();
        let m = tape.leaf(m0.clone());
        let v = tape.leaf_vector(&v0);
        let f = build(&mut tape, m, v);
        let g = tape.backward(f).unwrap();
        let (gm, gv) = (g.wrt(m), g.wrt(v));

        let eval = |mv: &[f64], vv: &[f64]| {
            let mut tape = Tape::new();
            let m = tape.constant(Mat::from_fn(3, 3, |r, c| mv[r * 3 + c]));
            let v = tape.constant_vector(vv);
            let f = build(&mut tape, m, v);
            tape.value(f).data()[0]
        };
        let m_flat: Vec<f64> = m0.data().to_vec();
        for k in 0..9 {
            let f_of_m = |mv: &[f64]| eval(mv, &v0);
            let fd = central_diff(&f_of_m, &m_flat, k, 1e-5);
            assert_relative_eq!(gm.data()[k], fd, max_relative = 1e-6, epsilon = 1e-9);
        }
        for k in 0..3 {
            let f_of_v = |vv: &[f64]| eval(&m_flat, vv);
            let fd = central_diff(&f_of_v, &v0, k, 1e-5);
            assert_relative_eq!(gv.data()[k], fd, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    /// One GRU cell built from tape primitives.
    fn gru_cell(
        tape: &mut Tape,
        weights: &[DualValue; 6],
        biases: &[DualValue; 6],
        x: DualValue,
        h: DualValue,
    ) -> DualValue {
        let [w_ir, w_hr, w_iz, w_hz, w_in, w_hn] = *weights;
        let [b_ir, b_hr, b_iz, b_hz, b_in, b_hn] = *biases;
        let rx = tape.matvec(w_ir, x);
        let rh = tape.matvec(w_hr, h);
        let r1 = tape.add(rx, b_ir);
        let r2 = tape.add(rh, b_hr);
        let r3 = tape.add(r1, r2);
        let r = tape.sigmoid(r3);
        let zx = tape.matvec(w_iz, x);
        let zh = tape.matvec(w_hz, h);
        let z1 = tape.add(zx, b_iz);
        let z2 = tape.add(zh, b_hz);
        let z3 = tape.add(z1, z2);
        let z = tape.sigmoid(z3);
        let nx = tape.matvec(w_in, x);
        let nh = tape.matvec(w_hn, h);
        let n1 = tape.add(nx, b_in);
        let n2 = tape.add(nh, b_hn);
        let gated = tape.mul(r, n2);
        let n3 = tape.add(n1, gated);
        let n = tape.tanh(n3);
        let ones = tape.constant_vector(&vec![1.0; tape.value(n).rows()]);
        let omz = tape.sub(ones, z);
        let first = tape.mul(omz, n);
        let second = tape.mul(z, h);
        tape.add(first, second)
    }

    #[test]
    fn gru_unroll_gradients_match_finite_differences() {
        // Three steps of a 2-unit GRU on 2-dim inputs; the loss is the
        // squared norm of the last hidden state. Every weight and bias is
        // perturbed by central differences.
        let hidden = 2;
        let input = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut theta: Vec<f64> = Vec::new();
        for _ in 0..3 {
            for _ in 0..hidden * input {
                theta.push(rng.gen_range(-0.7..0.7));
            }
            for _ in 0..hidden * hidden {
                theta.push(rng.gen_range(-0.7..0.7));
            }
        }
        for _ in 0..6 * hidden {
            theta.push(rng.gen_range(-0.3..0.3));
        }
        let xs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..input).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let run = |theta: &[f64], tape: &mut Tape, as_leaf: bool| -> DualValue {
            let mut pos = 0;
            let mut take = |tape: &mut Tape, rows: usize, cols: usize| {
                let m = Mat::from_fn(rows, cols, |r, c| theta[pos + r * cols + c]);
                pos += rows * cols;
                if as_leaf {
                    tape.leaf(m)
                } else {
                    tape.constant(m)
                }
            };
            let w_ir = take(tape, hidden, input);
            let w_hr = take(tape, hidden, hidden);
            let w_iz = take(tape, hidden, input);
            let w_hz = take(tape, hidden, hidden);
            let w_in = take(tape, hidden, input);
            let w_hn = take(tape, hidden, hidden);
            let weights = [w_ir, w_hr, w_iz, w_hz, w_in, w_hn];
            let biases = [
                take(tape, hidden, 1),
                take(tape, hidden, 1),
                take(tape, hidden, 1),
                take(tape, hidden, 1),
                take(tape, hidden, 1),
                take(tape, hidden, 1),
            ];
            let mut h = tape.constant_vector(&vec![0.0; hidden]);
            for x in &xs {
                let xv = tape.constant_vector(x);
                h = gru_cell(tape, &weights, &biases, xv, h);
            }
            tape.dot(h, h)
        };

        let mut tape = Tape::new();
        let f = run(&theta, &mut tape, true);
        let g = tape.backward(f).unwrap();
        let mut grads = Vec::new();
        for id in 0..tape.len() {
            let v = DualValue { id };
            if matches!(tape.nodes[id].op, Op::Leaf) {
                grads.extend_from_slice(g.wrt(v).data());
            }
        }
        assert_eq!(grads.len(), theta.len());

        let eval = |tv: &[f64]| {
            let mut tape = Tape::new();
            let f = run(tv, &mut tape, false);
            tape.value(f).data()[0]
        };
        for k in 0..theta.len() {
            let fd = central_diff(&eval, &theta, k, 1e-5);
            if fd.abs() < 1e-3 {
                assert_relative_eq!(grads[k], fd, epsilon = 1e-7, max_relative = 1e-4);
            } else {
                assert_relative_eq!(grads[k], fd, max_relative = 1e-4);
            }
        }
    }
}
