//! Dense row-major matrices and the Kronecker kernels the regularizer is
//! built on.
//!
//! Vectorization is column-stacking: `vec(M)[j*rows + i] = M[i, j]`. Under
//! that convention `(L ⊗ R) vec(V) = vec(R V Lᵀ)`, which is what lets
//! quadratic forms through Kronecker-factored matrices be evaluated without
//! ever materializing the product.

use crate::error::{Error, Result};

/// Materialized Kronecker products larger than this many elements are
/// refused; callers at that size should be using the factored kernels.
pub const KRON_ELEM_CAP: usize = 1 << 24;

/// Full symmetric eigendecomposition is used up to this side length;
/// beyond it `min_eig_lower_bound` falls back to cheaper bounds.
pub const EIG_DIM_CAP: usize = 64;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dense vector of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    pub data: Vec<f64>,
}

impl Vector {
    pub fn zeros(n: usize) -> Self {
        Vector { data: vec![0.0; n] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot length mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "payload length mismatch");
        Matrix { rows, cols, data }
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = out.row_mut(i);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn a_mul_bt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "a_mul_bt inner dimension mismatch");
        Matrix::from_fn(self.rows, other.rows, |i, j| {
            self.row(i).iter().zip(other.row(j)).map(|(a, b)| a * b).sum()
        })
    }

    /// `selfᵀ · other`.
    pub fn at_mul_b(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "at_mul_b inner dimension mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.get(k, i);
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = out.row_mut(i);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    /// `self · v` for a column vector `v`.
    pub fn mat_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mat_vec length mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let data = self.data.iter().map(|a| a * s).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    /// `self += s * other`, in place.
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (d, o) in self.data.iter_mut().zip(&other.data) {
            *d += s * o;
        }
    }

    /// Frobenius inner product, which equals `vec(self)ᵀ vec(other)` under
    /// any fixed stacking order.
    pub fn frob_dot(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "frob_dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute difference from the transpose.
    pub fn asymmetry(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "asymmetry needs a square matrix");
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

/// Column-stacking vectorization: entry `(i, j)` lands at `j*rows + i`.
pub fn vec_mat(m: &Matrix) -> Vector {
    let mut data = Vec::with_capacity(m.rows() * m.cols());
    for j in 0..m.cols() {
        for i in 0..m.rows() {
            data.push(m.get(i, j));
        }
    }
    Vector { data }
}

/// Inverse of [`vec_mat`]; fails if the length does not factor as `rows*cols`.
pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return Err(Error::size(format!(
            "unvec: vector of length {} cannot fill a {rows}x{cols} matrix",
            v.len()
        )));
    }
    let mut m = Matrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m.set(i, j, v.data[j * rows + i]);
        }
    }
    Ok(m)
}

/// Materialized Kronecker product `a ⊗ b`. Refused above [`KRON_ELEM_CAP`]
/// elements so an oversized request fails loudly instead of thrashing.
pub fn kron(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let rows = a.rows().checked_mul(b.rows());
    let cols = a.cols().checked_mul(b.cols());
    let (rows, cols) = match (rows, cols) {
        (Some(r), Some(c)) if r.checked_mul(c).is_some_and(|n| n <= KRON_ELEM_CAP) => (r, c),
        _ => {
            return Err(Error::size(format!(
                "kron: {}x{} by {}x{} exceeds the element cap {KRON_ELEM_CAP}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )))
        }
    };
    let mut out = Matrix::zeros(rows, cols);
    for ia in 0..a.rows() {
        for ja in 0..a.cols() {
            let s = a.get(ia, ja);
            if s == 0.0 {
                continue;
            }
            for ib in 0..b.rows() {
                for jb in 0..b.cols() {
                    out.set(ia * b.rows() + ib, ja * b.cols() + jb, s * b.get(ib, jb));
                }
            }
        }
    }
    Ok(out)
}

/// `vec(X)ᵀ (L ⊗ R) vec(Y)` evaluated as `vec(X)ᵀ vec(R Y Lᵀ)`.
///
/// Shapes: `L: a×b`, `R: c×d`, `X: c×a`, `Y: d×b`. Cost is
/// `O(c·d·b + c·b·a + c·a)` multiplies instead of the `O((ca)·(db))` of the
/// materialized product.
pub fn kron_quadform(l: &Matrix, r: &Matrix, x: &Matrix, y: &Matrix) -> Result<f64> {
    let (a, b) = l.shape();
    let (c, d) = r.shape();
    if x.shape() != (c, a) {
        return Err(Error::size(format!(
            "kron_quadform: X is {}x{}, expected {c}x{a}",
            x.rows(),
            x.cols()
        )));
    }
    if y.shape() != (d, b) {
        return Err(Error::size(format!(
            "kron_quadform: Y is {}x{}, expected {d}x{b}",
            y.rows(),
            y.cols()
        )));
    }
    let ryl = r.matmul(y).a_mul_bt(l);
    Ok(x.frob_dot(&ryl))
}

/// Lower Cholesky factor `G` with `G Gᵀ = m`. The input is symmetrized
/// exactly first; failure of the decomposition reports the matrix as not
/// positive definite.
pub fn cholesky_factor(m: &Matrix) -> Result<Matrix> {
    if m.rows() != m.cols() {
        return Err(Error::size(format!(
            "cholesky needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::numeric("cholesky of a non-finite matrix"));
    }
    let n = m.rows();
    let sym = Matrix::from_fn(n, n, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)));
    match nalgebra::Cholesky::new(sym.to_nalgebra()) {
        Some(ch) => {
            let l = ch.l();
            Ok(Matrix::from_fn(n, n, |i, j| l[(i, j)]))
        }
        None => Err(Error::singular("matrix is not positive definite")),
    }
}

/// Matrix inverse via LU with partial pivoting. Singular inputs are a
/// [`Error::singular`] so callers can map them to a dedicated exit path.
pub fn inverse(m: &Matrix) -> Result<Matrix> {
    if m.rows() != m.cols() {
        return Err(Error::size(format!(
            "inverse needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::numeric("inverse of a non-finite matrix"));
    }
    match m.to_nalgebra().try_inverse() {
        Some(inv) => {
            let n = m.rows();
            let out = Matrix::from_fn(n, n, |i, j| inv[(i, j)]);
            if out.is_finite() {
                Ok(out)
            } else {
                Err(Error::singular("matrix inverse overflowed"))
            }
        }
        None => Err(Error::singular("matrix is singular")),
    }
}

/// A floor on the smallest eigenvalue of a symmetric matrix.
///
/// Up to [`EIG_DIM_CAP`] the bound is the exact minimum eigenvalue from a
/// full symmetric eigendecomposition. Above that a successful Cholesky
/// factorization certifies `0.0`; otherwise the Gershgorin disc bound is
/// returned. Inputs asymmetric beyond `1e-10` are rejected.
pub fn min_eig_lower_bound(m: &Matrix) -> Result<f64> {
    if m.rows() != m.cols() {
        return Err(Error::size(format!(
            "min_eig_lower_bound: matrix is {}x{}, expected square",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::numeric("min_eig_lower_bound: non-finite entries"));
    }
    if m.asymmetry() > 1e-10 {
        return Err(Error::contract(format!(
            "min_eig_lower_bound: asymmetry {} exceeds 1e-10",
            m.asymmetry()
        )));
    }
    let n = m.rows();
    if n == 0 {
        return Err(Error::size("min_eig_lower_bound: empty matrix"));
    }
    // Exact-arithmetic symmetrization so the decomposition sees a perfectly
    // symmetric operand.
    let sym = Matrix::from_fn(n, n, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)));
    if n <= EIG_DIM_CAP {
        let eig = sym.to_nalgebra().symmetric_eigen();
        return Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min));
    }
    if sym.to_nalgebra().cholesky().is_some() {
        return Ok(0.0);
    }
    let gershgorin = (0..n)
        .map(|i| {
            let radius: f64 =
                (0..n).filter(|&j| j != i).map(|j| sym.get(i, j).abs()).sum();
            sym.get(i, i) - radius
        })
        .fold(f64::INFINITY, f64::min);
    Ok(gershgorin)
}

/// Deterministic orthogonal matrix: QR of a seeded Gaussian square matrix,
/// with column signs fixed so the factorization is unique.
pub fn random_orthogonal(dim: usize, seed: u64) -> Matrix {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = crate::rng::open(seed, crate::rng::stream::ROTATION);
    let g = nalgebra::DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for k in 0..dim {
        if r[(k, k)] < 0.0 {
            for i in 0..dim {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }
    Matrix::from_fn(dim, dim, |i, j| q[(i, j)])
}
