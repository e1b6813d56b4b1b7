//! Dense linear-algebra kernels used by the integrators.
//!
//! Everything here is deterministic: the same input always produces
//! bit-identical output, independent of thread count. Matrices are small
//! (k, d up to a few dozen) or short-and-wide (k x M sample matrices), so
//! plain row-major storage with straightforward loops is sufficient.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Relative tolerance below which a QR pivot is considered zero.
pub const QR_RANK_TOL: f64 = 1e-14;

/// Default relative eigenvalue cut-off for the pseudo-inverse solve.
pub const DEFAULT_PINV_THRESHOLD: f64 = 1e-12;

/// Negative eigenvalues below `-NEG_EIG_TOL * lambda_max` reject a matrix as
/// not positive semidefinite.
pub const NEG_EIG_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },
    #[error("matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e}, max {max_eigenvalue:e})")]
    NotPsd {
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

fn mismatch(op: &'static str, detail: String) -> LinalgError {
    LinalgError::DimensionMismatch { op, detail }
}

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for j in 0..self.cols.min(8) {
                write!(f, "{:>12.5e} ", self[(i, j)])?;
            }
            if self.cols > 8 {
                write!(f, "...")?;
            }
            writeln!(f)?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows * cols != data.len() {
            return Err(mismatch(
                "from_vec",
                format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and model tables.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, v) in values.iter().enumerate() {
            self[(i, j)] = *v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.rows {
            return Err(mismatch(
                "matmul",
                format!("{:?} * {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for p in 0..self.cols {
                let a = self.data[i * self.cols + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * other.cols..(p + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ * other` without forming the transpose.
    pub fn tr_matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.rows != other.rows {
            return Err(mismatch(
                "tr_matmul",
                format!("{:?}ᵀ * {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for p in 0..self.rows {
            let a_row = self.row(p);
            let b_row = other.row(p);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * otherᵀ`; every entry is a sequential dot product of two rows.
    pub fn matmul_tr(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.cols {
            return Err(mismatch(
                "matmul_tr",
                format!("{:?} * {:?}ᵀ", self.shape(), other.shape()),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for l in 0..other.rows {
                out.data[i * other.rows + l] = dot(a, other.row(l));
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix, LinalgError> {
        if self.shape() != other.shape() {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<(), LinalgError> {
        if self.shape() != other.shape() {
            return Err(mismatch(
                "axpy",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Frobenius norm of `self - other`.
    pub fn distance(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `(self + selfᵀ) / 2`.
    pub fn symmetrized(&self) -> Result<Matrix, LinalgError> {
        if self.rows != self.cols {
            return Err(mismatch("symmetrize", format!("{:?}", self.shape())));
        }
        let n = self.rows;
        Ok(Matrix::from_fn(n, n, |i, j| {
            0.5 * (self.data[i * n + j] + self.data[j * n + i])
        }))
    }

    /// Matrix-vector product `self * x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Sequential left-to-right dot product.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Reduced QR factorization `a = q r` of a tall matrix via Householder
/// reflections. The diagonal of `r` is made strictly positive.
pub fn reduced_qr(a: &Matrix) -> Result<(Matrix, Matrix), LinalgError> {
    let (n, p) = a.shape();
    if n < p {
        return Err(mismatch("reduced_qr", format!("rows {n} < cols {p}")));
    }
    let scale = a.frobenius_norm();
    if p > 0 && scale == 0.0 {
        return Err(LinalgError::RankDeficient { column: 0 });
    }
    // Householder vectors are stored column-wise in `work` below the diagonal.
    let mut work = a.transpose(); // p x n, row j = column j of a
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut r = Matrix::zeros(p, p);
    for j in 0..p {
        let col = &work.row(j)[j..];
        let alpha_norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = col.to_vec();
        let alpha = if v[0] >= 0.0 { -alpha_norm } else { alpha_norm };
        v[0] -= alpha;
        let vnorm_sq: f64 = v.iter().map(|x| x * x).sum();
        if vnorm_sq > 0.0 {
            // apply H = I - 2 v vᵀ / (vᵀv) to columns j..p
            for c in j..p {
                let target = &mut work.row_mut(c)[j..];
                let coef = 2.0 * dot(&v, target) / vnorm_sq;
                for (t, vi) in target.iter_mut().zip(&v) {
                    *t -= coef * vi;
                }
            }
        }
        for c in j..p {
            r[(j, c)] = work[(c, j)];
        }
        if r[(j, j)].abs() <= QR_RANK_TOL * scale {
            return Err(LinalgError::RankDeficient { column: j });
        }
        vs.push(v);
    }
    // Q = H_0 H_1 ... H_{p-1} applied to the first p columns of the identity.
    let mut q_t = Matrix::zeros(p, n); // row c = column c of Q
    for c in 0..p {
        q_t[(c, c)] = 1.0;
    }
    for j in (0..p).rev() {
        let v = &vs[j];
        let vnorm_sq: f64 = v.iter().map(|x| x * x).sum();
        if vnorm_sq == 0.0 {
            continue;
        }
        for c in 0..p {
            let target = &mut q_t.row_mut(c)[j..];
            let coef = 2.0 * dot(v, target) / vnorm_sq;
            for (t, vi) in target.iter_mut().zip(v) {
                *t -= coef * vi;
            }
        }
    }
    // Sign convention: diag(r) > 0.
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            for c in j..p {
                r[(j, c)] = -r[(j, c)];
            }
            for v in q_t.row_mut(j) {
                *v = -*v;
            }
        }
    }
    Ok((q_t.transpose(), r))
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEig {
    /// Sorted in descending order.
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the eigenvector of `eigenvalues[i]`.
    pub eigenvectors: Matrix,
}

impl SymEig {
    pub fn max(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    pub fn reconstruct(&self) -> Matrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        Matrix::from_fn(n, n, |i, j| {
            let mut s = 0.0;
            for (l, lam) in self.eigenvalues.iter().enumerate() {
                s += v[(i, l)] * lam * v[(j, l)];
            }
            s
        })
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. The input is
/// symmetrized as `(c + cᵀ)/2` first.
pub fn sym_eig(c: &Matrix) -> Result<SymEig, LinalgError> {
    let mut a = c.symmetrized()?;
    let n = a.rows();
    let mut v = Matrix::identity(n);
    let total = a.frobenius_norm();
    if total == 0.0 || n == 0 {
        return Ok(SymEig {
            eigenvalues: vec![0.0; n],
            eigenvectors: v,
        });
    }
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // relative test keeps small eigenvalues accurate
                if apq.abs() <= 0.5 * f64::EPSILON * (app.abs() * aqq.abs()).sqrt()
                    || apq.abs() <= f64::MIN_POSITIVE * total
                {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = cs * akp - sn * akq;
                    a[(k, q)] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = cs * apk - sn * aqk;
                    a[(q, k)] = sn * apk + cs * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = cs * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + cs * vkq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vecs = Matrix::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        let mut col = v.column(old);
        normalize_sign(&mut col);
        vecs.set_column(new, &col);
    }
    Ok(SymEig {
        eigenvalues,
        eigenvectors: vecs,
    })
}

/// Flips `v` so its largest-magnitude entry is positive (first one on ties).
pub(crate) fn normalize_sign(v: &mut [f64]) {
    let mut best = 0.0_f64;
    let mut sign = 1.0;
    for x in v.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Minimal-norm solve `x = c⁺ b` for a symmetric positive semidefinite `c`.
/// Eigenvalues below `rel_threshold * lambda_max` are treated as zero.
pub fn solve_spsd_minnorm(c: &Matrix, b: &Matrix, rel_threshold: f64) -> Result<Matrix, LinalgError> {
    let eig = sym_eig(c)?;
    pinv_apply(&eig, b, rel_threshold)
}

/// Applies the thresholded pseudo-inverse of a precomputed eigendecomposition.
pub fn pinv_apply(eig: &SymEig, b: &Matrix, rel_threshold: f64) -> Result<Matrix, LinalgError> {
    let k = eig.eigenvalues.len();
    if b.rows() != k {
        return Err(mismatch(
            "solve_spsd_minnorm",
            format!("{k}x{k} system with rhs {:?}", b.shape()),
        ));
    }
    let lam_max = eig.max();
    let lam_min = eig.min();
    if lam_max < 0.0 || lam_min < -NEG_EIG_TOL * lam_max.max(0.0) {
        return Err(LinalgError::NotPsd {
            min_eigenvalue: lam_min,
            max_eigenvalue: lam_max,
        });
    }
    let mut out = Matrix::zeros(k, b.cols());
    if lam_max == 0.0 {
        return Ok(out);
    }
    let cut = rel_threshold * lam_max;
    let v = &eig.eigenvectors;
    // out = V diag(1/λ) Vᵀ b over retained eigenpairs
    for (l, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam <= cut {
            continue;
        }
        let mut proj = vec![0.0; b.cols()];
        for i in 0..k {
            let vil = v[(i, l)];
            if vil == 0.0 {
                continue;
            }
            for (p, bv) in proj.iter_mut().zip(b.row(i)) {
                *p += vil * bv;
            }
        }
        let inv = 1.0 / lam;
        for i in 0..k {
            let coef = v[(i, l)] * inv;
            if coef == 0.0 {
                continue;
            }
            for (o, p) in out.row_mut(i).iter_mut().zip(&proj) {
                *o += coef * p;
            }
        }
    }
    Ok(out)
}

/// Thin singular value decomposition `a = u diag(s) vᵀ` by one-sided Jacobi.
#[derive(Debug, Clone)]
pub struct Svd {
    /// Left singular vectors as columns (rows(a) x r).
    pub u: Matrix,
    /// Descending singular values.
    pub s: Vec<f64>,
    /// Right singular vectors as columns (cols(a) x r).
    pub v: Matrix,
}

/// One-sided Jacobi SVD. Returns `r = min(rows, cols)` singular triplets; for
/// zero singular values the corresponding singular vectors still form an
/// orthonormal completion.
pub fn svd(a: &Matrix) -> Svd {
    let (n, p) = a.shape();
    if n >= p {
        let (w, s, v) = one_sided_jacobi(a);
        let u = left_vectors(&w, &s, n);
        Svd { u, s, v }
    } else {
        let (w, s, u) = one_sided_jacobi(&a.transpose());
        let v = left_vectors(&w, &s, p);
        Svd { u, s, v }
    }
}

/// Orthogonalizes the columns of a tall `a` (n x p, n >= p). Returns the
/// rotated columns (stored as rows of a p x n matrix), their norms sorted
/// descending, and the accumulated rotation (p x p, columns reordered).
fn one_sided_jacobi(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let p = a.cols();
    let mut w = a.transpose(); // row j = column j
    let mut v = Matrix::identity(p); // row j = column j of V
    let tol = f64::EPSILON;
    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..p {
            for j in (i + 1)..p {
                let alpha = dot(w.row(i), w.row(i));
                let beta = dot(w.row(j), w.row(j));
                let gamma = dot(w.row(i), w.row(j));
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta == 0.0 {
                    1.0
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                rotate_rows(&mut w, i, j, cs, sn);
                rotate_rows(&mut v, i, j, cs, sn);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..p).map(|j| dot(w.row(j), w.row(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let s = order.iter().map(|&j| norms[j]).collect();
    let w_sorted = Matrix::from_fn(p, w.cols(), |r, c| w[(order[r], c)]);
    let v_sorted = Matrix::from_fn(p, p, |r, c| v[(order[c], r)]);
    (w_sorted, s, v_sorted)
}

fn rotate_rows(m: &mut Matrix, i: usize, j: usize, cs: f64, sn: f64) {
    let cols = m.cols();
    let (lo, hi) = m.as_mut_slice().split_at_mut(j * cols);
    let ri = &mut lo[i * cols..(i + 1) * cols];
    let rj = &mut hi[..cols];
    for (x, y) in ri.iter_mut().zip(rj.iter_mut()) {
        let xi = *x;
        let yj = *y;
        *x = cs * xi - sn * yj;
        *y = sn * xi + cs * yj;
    }
}

/// Normalizes the rotated columns into left singular vectors, completing the
/// basis by Gram–Schmidt against the standard basis where a singular value
/// is (numerically) zero.
fn left_vectors(w: &Matrix, s: &[f64], n: usize) -> Matrix {
    let r = s.len();
    let smax = s.first().copied().unwrap_or(0.0);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(r);
    for j in 0..r {
        if s[j] > smax * 1e-13 * (n as f64) && s[j] > 0.0 {
            let mut c: Vec<f64> = w.row(j).iter().map(|x| x / s[j]).collect();
            // one re-orthogonalization pass against earlier vectors
            orthogonalize_against(&mut c, &cols);
            let nrm = dot(&c, &c).sqrt();
            c.iter_mut().for_each(|x| *x /= nrm);
            cols.push(c);
        } else {
            cols.push(complete_basis(&cols, n));
        }
    }
    let mut u = Matrix::zeros(n, r);
    for (j, c) in cols.iter().enumerate() {
        u.set_column(j, c);
    }
    u
}

fn orthogonalize_against(c: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let proj = dot(c, b);
        for (x, y) in c.iter_mut().zip(b) {
            *x -= proj * y;
        }
    }
}

fn complete_basis(basis: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for e in 0..n {
        let mut c = vec![0.0; n];
        c[e] = 1.0;
        orthogonalize_against(&mut c, basis);
        orthogonalize_against(&mut c, basis);
        let nrm = dot(&c, &c).sqrt();
        if nrm > best_norm + 1e-8 {
            best_norm = nrm;
            best = Some(c);
        }
    }
    let mut c = best.expect("basis already complete");
    c.iter_mut().for_each(|x| *x /= best_norm);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo_random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Matrix::from_fn(rows, cols, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn qr_identity() {
        let (q, r) = reduced_qr(&Matrix::identity(3)).unwrap();
        assert_eq!(q, Matrix::identity(3));
        assert_eq!(r, Matrix::identity(3));
    }

    #[test]
    fn qr_single_column() {
        let a = Matrix::from_rows(&[&[3.0], &[4.0]]);
        let (q, r) = reduced_qr(&a).unwrap();
        assert!((q[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((q[(1, 0)] - 0.8).abs() < 1e-15);
        assert!((r[(0, 0)] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn qr_negative_column_gets_positive_diagonal() {
        let a = Matrix::from_rows(&[&[-3.0], &[-4.0]]);
        let (q, r) = reduced_qr(&a).unwrap();
        assert!((r[(0, 0)] - 5.0).abs() < 1e-15);
        assert!((q[(0, 0)] + 0.6).abs() < 1e-15);
    }

    #[test]
    fn qr_reconstructs_random_tall() {
        let a = pseudo_random(9, 4, 3);
        let (q, r) = reduced_qr(&a).unwrap();
        let qtq = q.tr_matmul(&q).unwrap();
        assert!(qtq.distance(&Matrix::identity(4)) < 1e-12);
        assert!(q.matmul(&r).unwrap().distance(&a) < 1e-12 * a.frobenius_norm());
        for i in 0..4 {
            assert!(r[(i, i)] > 0.0);
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn qr_rejects_zero_column_and_dependent_columns() {
        let a = Matrix::from_rows(&[&[1.0, 0.0], &[2.0, 0.0], &[3.0, 0.0]]);
        assert_eq!(reduced_qr(&a), Err(LinalgError::RankDeficient { column: 1 }));
        let b = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]);
        assert_eq!(reduced_qr(&b), Err(LinalgError::RankDeficient { column: 1 }));
        assert!(matches!(
            reduced_qr(&Matrix::zeros(2, 3)),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn qr_is_deterministic() {
        let a = pseudo_random(7, 3, 11);
        assert_eq!(reduced_qr(&a).unwrap(), reduced_qr(&a).unwrap());
    }

    #[test]
    fn eig_examples() {
        let e = sym_eig(&Matrix::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 1.0]);
        let e = sym_eig(&Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]])).unwrap();
        assert!((e.eigenvalues[0] - 3.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-14);
        let e = sym_eig(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(e.eigenvalues, vec![0.0; 3]);
        assert!(matches!(
            sym_eig(&Matrix::zeros(2, 3)),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn eig_reconstructs_random_symmetric() {
        let b = pseudo_random(6, 6, 5);
        let c = b.add(&b.transpose()).unwrap();
        let e = sym_eig(&c).unwrap();
        assert!(e.reconstruct().distance(&c) <= 1e-12 * c.frobenius_norm());
        let vtv = e.eigenvectors.tr_matmul(&e.eigenvectors).unwrap();
        assert!(vtv.distance(&Matrix::identity(6)) < 1e-12);
        assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn minnorm_examples() {
        let b = pseudo_random(3, 4, 1);
        let x = solve_spsd_minnorm(&Matrix::identity(3), &b, DEFAULT_PINV_THRESHOLD).unwrap();
        assert!(x.distance(&b) < 1e-15);

        let c = Matrix::diag(&[1.0, 0.0]);
        let b = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let x = solve_spsd_minnorm(&c, &b, DEFAULT_PINV_THRESHOLD).unwrap();
        assert_eq!(x, Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 0.0]]));
    }

    #[test]
    fn minnorm_recovers_spd_solution() {
        let g = pseudo_random(4, 8, 9);
        let c = g.matmul_tr(&g).unwrap();
        let x0 = pseudo_random(4, 3, 10);
        let b = c.matmul(&x0).unwrap();
        let x = solve_spsd_minnorm(&c, &b, DEFAULT_PINV_THRESHOLD).unwrap();
        assert!(x.distance(&x0) < 1e-8);
    }

    #[test]
    fn minnorm_rejects_indefinite() {
        let c = Matrix::diag(&[1.0, -0.5]);
        let b = Matrix::identity(2);
        assert!(matches!(
            solve_spsd_minnorm(&c, &b, DEFAULT_PINV_THRESHOLD),
            Err(LinalgError::NotPsd { .. })
        ));
    }

    #[test]
    fn svd_reconstructs_wide_and_tall() {
        for &(n, p) in &[(5, 20), (20, 5), (4, 4)] {
            let a = pseudo_random(n, p, (n * 31 + p) as u64);
            let d = svd(&a);
            let r = d.s.len();
            let us = Matrix::from_fn(n, r, |i, j| d.u[(i, j)] * d.s[j]);
            let back = us.matmul(&d.v.transpose()).unwrap();
            assert!(back.distance(&a) < 1e-12 * a.frobenius_norm());
            assert!(d.u.tr_matmul(&d.u).unwrap().distance(&Matrix::identity(r)) < 1e-12);
            assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_completes_basis_for_rank_deficient_input() {
        // rank 1, 3 x 10
        let a = Matrix::from_fn(3, 10, |i, j| (i as f64 + 1.0) * (j as f64 - 4.5));
        let d = svd(&a);
        assert!(d.s[1] < 1e-12 * d.s[0]);
        assert!(d.u.tr_matmul(&d.u).unwrap().distance(&Matrix::identity(3)) < 1e-12);
    }
}
