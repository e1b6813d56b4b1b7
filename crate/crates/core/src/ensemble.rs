//! Sample-matrix representation of the low-rank factors.
//!
//! A state holds the deterministic modes `u` (k x d, orthonormal rows) and
//! the stochastic-mode samples `y` (k x M, column j is one realization).
//! Every expectation is a plain sample average accumulated sequentially over
//! the sample index, so results do not depend on thread count.

use std::io::{self, BufRead, Read, Write};

use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, SymEig};

/// Tolerance on `‖u uᵀ − I‖_F` accepted by constructors.
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("rank {k} exceeds min(d, M) = {limit}")]
    RankTooLarge { k: usize, limit: usize },
    #[error("modes are not orthonormal: ‖uuᵀ − I‖_F = {defect:e}")]
    NotOrthonormal { defect: f64 },
    #[error("invalid ensemble: {0}")]
    Invalid(String),
    #[error("snapshot i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed snapshot: {0}")]
    Malformed(String),
}

/// Low-rank ensemble `(u, y)` at time `t`; the approximation is `uᵀ y`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub t: f64,
    u: Matrix,
    y: Matrix,
}

impl EnsembleState {
    pub fn new(t: f64, u: Matrix, y: Matrix) -> Result<Self, EnsembleError> {
        let (k, d) = u.shape();
        if k == 0 {
            return Err(EnsembleError::Invalid("rank must be at least 1".into()));
        }
        if k > d {
            return Err(EnsembleError::RankTooLarge { k, limit: d });
        }
        if y.rows() != k || y.cols() == 0 {
            return Err(EnsembleError::Invalid(format!(
                "y has shape {:?}, expected {k} x M with M >= 1",
                y.shape()
            )));
        }
        if !u.is_finite() || !y.is_finite() || !t.is_finite() {
            return Err(EnsembleError::Invalid("non-finite entries".into()));
        }
        let defect = orthonormality_defect(&u);
        if defect > ORTHONORMALITY_TOL {
            return Err(EnsembleError::NotOrthonormal { defect });
        }
        Ok(Self { t, u, y })
    }

    /// Skips validation; the caller guarantees the invariants.
    pub(crate) fn from_parts_unchecked(t: f64, u: Matrix, y: Matrix) -> Self {
        Self { t, u, y }
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }

    pub fn rank(&self) -> usize {
        self.u.rows()
    }

    pub fn dim(&self) -> usize {
        self.u.cols()
    }

    pub fn paths(&self) -> usize {
        self.y.cols()
    }

    pub fn gramian(&self) -> Gramian {
        gramian(&self.y)
    }

    pub fn into_parts(self) -> (f64, Matrix, Matrix) {
        (self.t, self.u, self.y)
    }
}

/// `‖u uᵀ − I‖_F`.
pub fn orthonormality_defect(u: &Matrix) -> f64 {
    let g = u.matmul_tr(u).expect("square by construction");
    g.distance(&Matrix::identity(u.rows()))
}

/// Sample second-moment matrix `E[y yᵀ]` of the stochastic modes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gramian {
    c: Matrix,
}

impl Gramian {
    pub fn matrix(&self) -> &Matrix {
        &self.c
    }

    pub fn eig(&self) -> SymEig {
        linalg::sym_eig(&self.c).expect("gramian is square")
    }

    /// Smallest eigenvalue (the k-th singular value of the Gramian).
    pub fn min_eigenvalue(&self) -> f64 {
        self.eig().min()
    }
}

/// `(1/M) Σ_j a_j b_jᵀ` over the columns of `a` (p x M) and `b` (q x M).
///
/// Each entry is a left-to-right sum over `j`, then divided by `M`.
pub fn expectation_outer(a: &Matrix, b: &Matrix) -> Result<Matrix, EnsembleError> {
    if a.cols() != b.cols() || a.cols() == 0 {
        return Err(LinalgError::DimensionMismatch {
            op: "expectation_outer",
            detail: format!("sample counts {} vs {}", a.cols(), b.cols()),
        }
        .into());
    }
    let mut out = a.matmul_tr(b)?;
    let m = a.cols() as f64;
    out.as_mut_slice().iter_mut().for_each(|v| *v /= m);
    Ok(out)
}

pub fn gramian(y: &Matrix) -> Gramian {
    let m = y.cols().max(1) as f64;
    let k = y.rows();
    let mut c = Matrix::zeros(k, k);
    for i in 0..k {
        for l in i..k {
            let v = linalg::dot(y.row(i), y.row(l)) / m;
            c[(i, l)] = v;
            c[(l, i)] = v;
        }
    }
    Gramian { c }
}

/// Rank-k truncated SVD of the sample matrix (d x M). The rows of `u` are
/// the leading left singular vectors, each signed so that its
/// largest-magnitude entry is positive; `y = u · samples`.
pub fn init_rank_k(samples: &Matrix, k: usize) -> Result<EnsembleState, EnsembleError> {
    let (d, m) = samples.shape();
    let limit = d.min(m);
    if k == 0 {
        return Err(EnsembleError::Invalid("rank must be at least 1".into()));
    }
    if k > limit {
        return Err(EnsembleError::RankTooLarge { k, limit });
    }
    if !samples.is_finite() {
        return Err(EnsembleError::Invalid("non-finite samples".into()));
    }
    let dec = linalg::svd(samples);
    let mut u = Matrix::zeros(k, d);
    for i in 0..k {
        let mut col = dec.u.column(i);
        linalg::normalize_sign(&mut col);
        u.row_mut(i).copy_from_slice(&col);
    }
    let y = u.matmul(samples)?;
    EnsembleState::new(0.0, u, y)
}

/// Ambient reconstruction `uᵀ y` (d x M).
pub fn reconstruct(state: &EnsembleState) -> Matrix {
    state.u.tr_matmul(&state.y).expect("consistent by construction")
}

/// `(1/M) Σ_j |x_j|²` over the columns of `x`.
pub fn mean_square_norm(x: &Matrix) -> f64 {
    let m = x.cols();
    if m == 0 {
        return 0.0;
    }
    let mut col_sq = vec![0.0; m];
    for i in 0..x.rows() {
        for (acc, v) in col_sq.iter_mut().zip(x.row(i)) {
            *acc += v * v;
        }
    }
    col_sq.iter().sum::<f64>() / m as f64
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"DLRASNP1";

/// Writes a snapshot as little-endian binary: magic, t, k, d, M, then u and
/// y row-major.
pub fn write_snapshot_binary<W: Write>(state: &EnsembleState, mut w: W) -> Result<(), EnsembleError> {
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&state.t.to_le_bytes())?;
    for n in [state.rank(), state.dim(), state.paths()] {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    for v in state.u.as_slice().iter().chain(state.y.as_slice()) {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot_binary<R: Read>(mut r: R) -> Result<EnsembleState, EnsembleError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(EnsembleError::Malformed("bad magic".into()));
    }
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    let t = f64::from_le_bytes(buf);
    let mut dims = [0usize; 3];
    for n in &mut dims {
        r.read_exact(&mut buf)?;
        *n = u64::from_le_bytes(buf) as usize;
    }
    let [k, d, m] = dims;
    let mut read_block = |len: usize| -> Result<Vec<f64>, EnsembleError> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    };
    let u = Matrix::from_vec(k, d, read_block(k * d)?)?;
    let y = Matrix::from_vec(k, m, read_block(k * m)?)?;
    EnsembleState::new(t, u, y)
}

/// Writes a snapshot as CSV: a `t,k,d,M` header line and its values, then
/// the rows of u, then the rows of y. Numbers carry 17 significant digits.
pub fn write_snapshot_csv<W: Write>(state: &EnsembleState, mut w: W) -> Result<(), EnsembleError> {
    writeln!(w, "t,k,d,M")?;
    writeln!(
        w,
        "{},{},{},{}",
        fmt_f64(state.t),
        state.rank(),
        state.dim(),
        state.paths()
    )?;
    for mat in [&state.u, &state.y] {
        for i in 0..mat.rows() {
            let line: Vec<String> = mat.row(i).iter().map(|v| fmt_f64(*v)).collect();
            writeln!(w, "{}", line.join(","))?;
        }
    }
    Ok(())
}

pub fn read_snapshot_csv<R: BufRead>(r: R) -> Result<EnsembleState, EnsembleError> {
    let mut lines = r.lines();
    let mut next = || -> Result<String, EnsembleError> {
        lines
            .next()
            .ok_or_else(|| EnsembleError::Malformed("unexpected end of file".into()))?
            .map_err(EnsembleError::from)
    };
    if next()?.trim() != "t,k,d,M" {
        return Err(EnsembleError::Malformed("missing header".into()));
    }
    let header = next()?;
    let fields: Vec<&str> = header.trim().split(',').collect();
    if fields.len() != 4 {
        return Err(EnsembleError::Malformed("header needs 4 fields".into()));
    }
    let parse_err = |e: &dyn std::fmt::Display| EnsembleError::Malformed(e.to_string());
    let t: f64 = fields[0].parse().map_err(|e| parse_err(&e))?;
    let dims: Vec<usize> = fields[1..]
        .iter()
        .map(|s| s.parse::<usize>().map_err(|e| parse_err(&e)))
        .collect::<Result<_, _>>()?;
    let (k, d, m) = (dims[0], dims[1], dims[2]);
    let mut read_rows = |rows: usize, cols: usize| -> Result<Matrix, EnsembleError> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = next()?;
            let before = data.len();
            for tok in line.trim().split(',') {
                data.push(tok.parse::<f64>().map_err(|e| parse_err(&e))?);
            }
            if data.len() - before != cols {
                return Err(EnsembleError::Malformed(format!("expected {cols} columns")));
            }
        }
        Ok(Matrix::from_vec(rows, cols, data)?)
    };
    let u = read_rows(k, d)?;
    let y = read_rows(k, m)?;
    EnsembleState::new(t, u, y)
}

/// 17 significant digits in scientific notation; round-trips every `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
