//! Dense row-major matrices and the Householder thin QR factorisation.

use std::fmt;

use crate::error::{GsdError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GsdError::Shape(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(GsdError::Validation(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(GsdError::Shape(format!(
                    "row {} has length {}, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Unchecked constructor for internal hot paths where finiteness is the caller's concern.
    pub(crate) fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// First `k` columns as a new matrix.
    pub fn leading_columns(&self, k: usize) -> DenseMatrix {
        self.select_columns(&(0..k.min(self.cols)).collect::<Vec<_>>())
    }

    pub fn select_columns(&self, cols: &[usize]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, cols.len());
        for i in 0..self.rows {
            for (jj, &j) in cols.iter().enumerate() {
                out.data[i * cols.len() + jj] = self.get(i, j);
            }
        }
        out
    }

    pub fn select_rows(&self, rows: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        DenseMatrix::from_vec(rows.len(), self.cols, data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        DenseMatrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(GsdError::Shape(format!(
                "elementwise op on {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(DenseMatrix::from_vec(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(GsdError::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = vec![0.0; a.rows * b.cols];
    gemm_nn(&a.data, &b.data, &mut out, a.rows, a.cols, b.cols);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(GsdError::Numerical("matmul produced a non-finite entry".into()));
    }
    Ok(DenseMatrix::from_vec(a.rows, b.cols, out))
}

/// `out += a(m×k) · b(k×n)`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a(m×k) · b(n×k)ᵀ`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out += a(m×k)ᵀ · b(m×n)`, giving a k×n result.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            if ap == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += ap * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Thin QR factors: `q` is D×T with orthonormal columns and `r` is T×B upper triangular,
/// T = min(D, B).
#[derive(Clone, Debug, PartialEq)]
pub struct QrResult {
    pub q: DenseMatrix,
    pub r: DenseMatrix,
}

/// Householder QR of a D×B matrix using T = min(D, B) reflections.
///
/// Each step takes the sub-column `z = A[t.., t]`, sets `α = sign(z₀)·‖z‖` with
/// `sign(0) = +1`, and reflects with `w = (z + α e₁)/‖z + α e₁‖`, leaving `-α` on the
/// diagonal. A zero sub-column skips its reflection, leaving a zero diagonal entry.
pub fn householder_qr(g: &DenseMatrix) -> Result<QrResult> {
    if g.rows == 0 || g.cols == 0 {
        return Err(GsdError::Shape(format!(
            "QR of empty {}x{} matrix",
            g.rows, g.cols
        )));
    }
    if !g.all_finite() {
        return Err(GsdError::Validation("QR input has non-finite entries".into()));
    }
    let (d, b) = g.shape();
    let t_max = d.min(b);
    let mut a = g.data.clone();
    // Stored reflectors, `None` where the step was skipped.
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(t_max);

    for t in 0..t_max {
        let z: Vec<f64> = (t..d).map(|i| a[i * b + t]).collect();
        let norm = norm2(&z);
        if norm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let alpha = if z[0] >= 0.0 { norm } else { -norm };
        let mut w = z;
        w[0] += alpha;
        let wn = norm2(&w);
        for v in w.iter_mut() {
            *v /= wn;
        }
        // A[t.., t..] -= 2 w (wᵀ A[t.., t..])
        for j in t..b {
            let mut s = 0.0;
            for (ii, wi) in w.iter().enumerate() {
                s += wi * a[(t + ii) * b + j];
            }
            let s2 = 2.0 * s;
            for (ii, wi) in w.iter().enumerate() {
                a[(t + ii) * b + j] -= s2 * wi;
            }
        }
        a[t * b + t] = -alpha;
        for i in (t + 1)..d {
            a[i * b + t] = 0.0;
        }
        reflectors.push(Some(w));
    }

    let mut r = DenseMatrix::zeros(t_max, b);
    for i in 0..t_max {
        for j in i..b {
            r.data[i * b + j] = a[i * b + j];
        }
    }

    // Q = H₁ ··· H_T applied to the first T columns of the identity, right to left.
    let mut q = vec![0.0; d * t_max];
    for i in 0..t_max {
        q[i * t_max + i] = 1.0;
    }
    for t in (0..t_max).rev() {
        let Some(w) = &reflectors[t] else { continue };
        for j in 0..t_max {
            let mut s = 0.0;
            for (ii, wi) in w.iter().enumerate() {
                s += wi * q[(t + ii) * t_max + j];
            }
            if s == 0.0 {
                continue;
            }
            let s2 = 2.0 * s;
            for (ii, wi) in w.iter().enumerate() {
                q[(t + ii) * t_max + j] -= s2 * wi;
            }
        }
    }

    Ok(QrResult {
        q: DenseMatrix::from_vec(d, t_max, q),
        r,
    })
}

/// Indices of diagonal entries of `r` with `|r_ii| > rel_tol · max_j |r_jj|`.
pub(crate) fn significant_diagonal(r: &DenseMatrix, rel_tol: f64) -> Result<Vec<usize>> {
    if !(rel_tol > 0.0) {
        return Err(GsdError::Validation(format!(
            "rank tolerance must be positive, got {rel_tol}"
        )));
    }
    for i in 1..r.rows {
        for j in 0..i.min(r.cols) {
            if r.get(i, j) != 0.0 {
                return Err(GsdError::Validation(format!(
                    "matrix is not upper triangular: entry ({i}, {j}) = {}",
                    r.get(i, j)
                )));
            }
        }
    }
    let n = r.rows.min(r.cols);
    let diag: Vec<f64> = (0..n).map(|i| r.get(i, i).abs()).collect();
    let largest = diag.iter().cloned().fold(0.0_f64, f64::max);
    if largest == 0.0 {
        return Ok(Vec::new());
    }
    let cut = rel_tol * largest;
    Ok(diag
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > cut)
        .map(|(i, _)| i)
        .collect())
}

/// Number of diagonal entries of the triangular factor above `rel_tol` times the largest one.
pub fn numerical_rank(r: &DenseMatrix, rel_tol: f64) -> Result<usize> {
    Ok(significant_diagonal(r, rel_tol)?.len())
}

pub const DEFAULT_RANK_TOL: f64 = 1e-10;
