//! Dense matrix kernels for small problems.
//!
//! Everything here operates on row-major `Mat` buffers and is written for the
//! problem sizes this crate actually sees: policy algebra on (d+1) x (d+1)
//! blocks with d <= 8, and batch programs with a few hundred variables.
//! The factorizations are textbook implementations (Cholesky, partially
//! pivoted LU, Householder QR, cyclic Jacobi) chosen for determinism and
//! easy auditing rather than peak speed.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for c in 0..self.cols {
                write!(f, "{:>12.6} ", self[(r, c)])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = f(r, c);
            }
        }
        m
    }

    /// Builds from row slices; all rows must have equal length.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut m = Mat::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged rows");
            m.data[i * c..(i + 1) * c].copy_from_slice(row);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for c in 0..self.cols {
                acc += row[c] * v[c];
            }
            out[r] = acc;
        }
        out
    }

    /// `self^T * v`.
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "tr_matvec shape mismatch");
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let vr = v[r];
            for c in 0..self.cols {
                out[c] += row[c] * vr;
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = out.row_mut(r);
                for c in 0..other.cols {
                    dst[c] += a * orow[c];
                }
            }
        }
        out
    }

    /// `self^T * other`.
    pub fn tr_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "tr_matmul shape mismatch");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for r in 0..self.cols {
                let a = arow[r];
                if a == 0.0 {
                    continue;
                }
                let dst = out.row_mut(r);
                for c in 0..other.cols {
                    dst[c] += a * brow[c];
                }
            }
        }
        out
    }

    /// Copy of the block starting at (r0, c0) with the given extent.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Mat {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "block out of range");
        Mat::from_fn(rows, cols, |r, c| self[(r0 + r, c0 + c)])
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, b: &Mat) {
        assert!(r0 + b.rows <= self.rows && c0 + b.cols <= self.cols, "block out of range");
        for r in 0..b.rows {
            for c in 0..b.cols {
                self[(r0 + r, c0 + c)] = b[(r, c)];
            }
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= s;
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add shape mismatch");
        let mut out = self.clone();
        for (v, o) in out.data.iter_mut().zip(&other.data) {
            *v += o;
        }
        out
    }

    /// Largest absolute asymmetry `|A - A^T|`.
    pub fn asymmetry(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let mut worst = 0.0f64;
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                worst = worst.max((self[(r, c)] - self[(c, r)]).abs());
            }
        }
        worst
    }

    pub fn trace(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        (0..self.rows).map(|i| self[(i, i)]).sum()
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols, "index out of range");
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols, "index out of range");
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot shape mismatch");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += s * x`.
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    assert_eq!(y.len(), x.len(), "axpy shape mismatch");
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Mat,
}

impl Cholesky {
    /// Factors `a = L L^T`. Fails if a pivot is not strictly positive.
    pub fn new(a: &Mat) -> Option<Cholesky> {
        assert_eq!(a.rows, a.cols, "cholesky needs a square matrix");
        let n = a.rows;
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return None;
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Some(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// Solves `a x = b` in place of a copy.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n, "solve shape mismatch");
        let mut x = b.to_vec();
        // forward: L y = b
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[(i, k)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// log(det a) via the factor diagonal.
    pub fn log_det(&self) -> f64 {
        (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<f64>() * 2.0
    }
}

/// LU factorization with partial pivoting, for small possibly indefinite systems.
#[derive(Clone, Debug)]
pub struct Lu {
    lu: Mat,
    perm: Vec<usize>,
}

impl Lu {
    pub fn new(a: &Mat) -> Option<Lu> {
        assert_eq!(a.rows, a.cols, "lu needs a square matrix");
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut piv = col;
            let mut best = lu[(col, col)].abs();
            for r in (col + 1)..n {
                let v = lu[(r, col)].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if !(best > 0.0) || !best.is_finite() {
                return None;
            }
            if piv != col {
                perm.swap(piv, col);
                for c in 0..n {
                    let tmp = lu[(piv, c)];
                    lu[(piv, c)] = lu[(col, c)];
                    lu[(col, c)] = tmp;
                }
            }
            let d = lu[(col, col)];
            for r in (col + 1)..n {
                let f = lu[(r, col)] / d;
                lu[(r, col)] = f;
                for c in (col + 1)..n {
                    let v = f * lu[(col, c)];
                    lu[(r, c)] -= v;
                }
            }
        }
        Some(Lu { lu, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows;
        assert_eq!(b.len(), n, "solve shape mismatch");
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.lu[(i, k)] * x[k];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.lu[(i, k)] * x[k];
            }
            x[i] = s / self.lu[(i, i)];
        }
        x
    }
}

/// Householder QR of a tall (or square) matrix, retaining the full `Q`.
///
/// For an m x n input with m >= n, `q` is m x m orthogonal and `r` is the
/// m x n upper trapezoid. Columns n..m of `q` span the left null space of the
/// input, which is how equality constraints get eliminated in the QP solver.
pub struct Qr {
    pub q: Mat,
    pub r: Mat,
}

pub fn qr(a: &Mat) -> Qr {
    let m = a.rows;
    let n = a.cols;
    assert!(m >= n, "qr expects rows >= cols");
    let mut r = a.clone();
    let mut q = Mat::identity(m);
    let mut v = vec![0.0; m];
    for k in 0..n.min(m.saturating_sub(1)) {
        // Householder vector for column k.
        let mut norm = 0.0;
        for i in k..m {
            norm += r[(i, k)] * r[(i, k)];
        }
        norm = norm.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[(k, k)] >= 0.0 { -norm } else { norm };
        let mut vnorm2 = 0.0;
        for i in k..m {
            let vi = if i == k { r[(i, k)] - alpha } else { r[(i, k)] };
            v[i] = vi;
            vnorm2 += vi * vi;
        }
        if vnorm2 == 0.0 {
            continue;
        }
        // Apply H = I - 2 v v^T / (v^T v) to R (left) and accumulate into Q (right).
        for c in k..n {
            let mut s = 0.0;
            for i in k..m {
                s += v[i] * r[(i, c)];
            }
            let f = 2.0 * s / vnorm2;
            for i in k..m {
                r[(i, c)] -= f * v[i];
            }
        }
        for rq in 0..m {
            let mut s = 0.0;
            for i in k..m {
                s += q[(rq, i)] * v[i];
            }
            let f = 2.0 * s / vnorm2;
            for i in k..m {
                q[(rq, i)] -= f * v[i];
            }
        }
    }
    // Zero the annihilated part exactly so rank logic can trust it.
    for c in 0..n {
        for rr in (c + 1)..m {
            r[(rr, c)] = 0.0;
        }
    }
    Qr { q, r }
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method.
///
/// Returns the eigenvalues sorted ascending. Intended for the small symmetric
/// matrices used in cost assembly and for PSD checks in tests.
pub fn symmetric_eigenvalues(a: &Mat) -> Vec<f64> {
    assert_eq!(a.rows, a.cols, "eigenvalues need a square matrix");
    assert!(a.asymmetry() <= 1e-9 * (1.0 + norm_inf(a.data())), "matrix is not symmetric");
    let n = a.rows;
    let mut m = a.clone();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for r in 0..n {
            for c in (r + 1)..n {
                off += m[(r, c)] * m[(r, c)];
            }
        }
        if off.sqrt() <= 1e-14 * (1.0 + norm_inf(m.data())) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eig
}
