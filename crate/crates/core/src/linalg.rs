//! Dense `f64` linear algebra used throughout the crate.
//!
//! [`DenseMatrix`] stores its entries row-major. Products go through
//! `matrixmultiply`, which accepts arbitrary strides, so transposed operands
//! never need to be materialized. The symmetric eigensolver and the
//! Cholesky solve used by the Kronecker oracle are delegated to `nalgebra`.

use std::fmt;

use thiserror::Error;

/// Largest number of entries [`kron`] is allowed to allocate.
pub const KRON_ENTRY_LIMIT: usize = 100_000_000;

/// Absolute asymmetry accepted by [`sym_eig`] (scaled by `max(1, ‖M‖_max)`).
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("expected a square matrix, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    AsymmetricInput { asymmetry: f64 },
    #[error("symmetric eigensolver did not converge within {limit} iterations")]
    IterationLimitExceeded { limit: usize },
    #[error("result would hold {entries} entries, limit is {limit}")]
    SizeGuardExceeded { entries: usize, limit: usize },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
}

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
        for r in 0..self.rows.min(8) {
            let row = &self.row(r)[..self.cols.min(8)];
            writeln!(f, "  {row:?}{}", if self.cols > 8 { " ..." } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::LengthMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows in DenseMatrix::from_rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
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

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in elementwise op");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a * b)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in axpy");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// `self · other`
    pub fn matmul(&self, other: &Self) -> Self {
        gemm(self, false, other, false)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Self) -> Self {
        gemm(self, true, other, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Self) -> Self {
        gemm(self, false, other, true)
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "shape mismatch in matvec");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Multiplies column `j` by `factors[j]`, i.e. `self · diag(factors)`.
    pub fn scale_columns(&self, factors: &[f64]) -> Self {
        assert_eq!(self.cols, factors.len(), "shape mismatch in scale_columns");
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, &f) in out.row_mut(i).iter_mut().zip(factors) {
                *v *= f;
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum of each row.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// `⟨self, other⟩_F = Σ self_ij · other_ij`
    pub fn frobenius_dot(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in frobenius_dot");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `max |M - Mᵀ|`; panics when not square.
    pub fn asymmetry(&self) -> f64 {
        assert!(self.is_square());
        let n = self.rows;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `(M + Mᵀ)/2`, exactly symmetric.
    pub fn symmetrized(&self) -> Self {
        assert!(self.is_square());
        let n = self.rows;
        let mut out = self.clone();
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// Copies the listed columns into a new `rows × idx.len()` matrix.
    pub fn select_columns(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            let src = self.row(i);
            for (dst, &j) in out.row_mut(i).iter_mut().zip(idx) {
                *dst = src[j];
            }
        }
        out
    }

    /// Writes the columns of `block` into the listed columns of `self`.
    pub fn scatter_columns(&mut self, idx: &[usize], block: &Self) {
        assert_eq!(self.rows, block.rows);
        assert_eq!(idx.len(), block.cols);
        for i in 0..self.rows {
            let cols = self.cols;
            let dst = &mut self.data[i * cols..(i + 1) * cols];
            for (&j, &v) in idx.iter().zip(block.row(i)) {
                dst[j] = v;
            }
        }
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

fn gemm(a: &DenseMatrix, trans_a: bool, b: &DenseMatrix, trans_b: bool) -> DenseMatrix {
    // logical shapes after the optional transposes
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(
        k, kb,
        "inner dimension mismatch: {:?}{} x {:?}{}",
        a.shape(),
        if trans_a { "ᵀ" } else { "" },
        b.shape(),
        if trans_b { "ᵀ" } else { "" }
    );
    let mut c = DenseMatrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: the strides above address exactly the `m×k`, `k×n` and `m×n`
    // extents of the three row-major buffers, which outlive the call.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Eigendecomposition `M = Q Λ Qᵀ` of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Column `j` is the unit eigenvector for `eigenvalues[j]`.
    pub eigenvectors: DenseMatrix,
}

impl SymmetricEigen {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `Q Λ Qᵀ`
    pub fn reconstruct(&self) -> DenseMatrix {
        self.eigenvectors
            .scale_columns(&self.eigenvalues)
            .matmul_t(&self.eigenvectors)
    }

    pub fn max_abs_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
///
/// The input must be symmetric to within [`SYMMETRY_TOLERANCE`]; callers
/// symmetrize first. The solver is capped at `50·n` iterations.
pub fn sym_eig(m: &DenseMatrix) -> Result<SymmetricEigen, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NonSquare {
            rows: m.rows,
            cols: m.cols,
        });
    }
    let asymmetry = m.asymmetry();
    if asymmetry > SYMMETRY_TOLERANCE * m.max_abs().max(1.0) {
        return Err(LinalgError::AsymmetricInput { asymmetry });
    }
    let n = m.rows;
    if n == 0 {
        return Ok(SymmetricEigen {
            eigenvalues: Vec::new(),
            eigenvectors: DenseMatrix::zeros(0, 0),
        });
    }
    if n == 1 {
        return Ok(SymmetricEigen {
            eigenvalues: vec![m[(0, 0)]],
            eigenvectors: DenseMatrix::identity(1),
        });
    }
    let limit = 50 * n;
    let input = nalgebra::DMatrix::from_row_slice(n, n, &m.data);
    let eig = nalgebra::linalg::SymmetricEigen::try_new(input, f64::EPSILON, limit)
        .ok_or(LinalgError::IterationLimitExceeded { limit })?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let eigenvectors = DenseMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    Ok(SymmetricEigen {
        eigenvalues,
        eigenvectors,
    })
}

pub fn frobenius_norm(m: &DenseMatrix) -> f64 {
    m.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `max |λ|` of a symmetric matrix.
pub fn spectral_norm_symmetric(m: &DenseMatrix) -> Result<f64, LinalgError> {
    Ok(sym_eig(m)?.max_abs_eigenvalue())
}

/// Kronecker product `A ⊗ B`: block `(i, j)` is `a_ij · B`.
pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let rows = a.rows * b.rows;
    let cols = a.cols * b.cols;
    let entries = rows.saturating_mul(cols);
    if entries > KRON_ENTRY_LIMIT {
        return Err(LinalgError::SizeGuardExceeded {
            entries,
            limit: KRON_ENTRY_LIMIT,
        });
    }
    let mut out = DenseMatrix::zeros(rows, cols);
    for ai in 0..a.rows {
        for aj in 0..a.cols {
            let s = a[(ai, aj)];
            if s == 0.0 {
                continue;
            }
            for bi in 0..b.rows {
                let dst = (ai * b.rows + bi) * cols + aj * b.cols;
                for (d, &v) in out.data[dst..dst + b.cols].iter_mut().zip(b.row(bi)) {
                    *d = s * v;
                }
            }
        }
    }
    Ok(out)
}

/// Column-stacking vectorization.
pub fn vectorize(m: &DenseMatrix) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.rows * m.cols);
    for j in 0..m.cols {
        for i in 0..m.rows {
            v.push(m[(i, j)]);
        }
    }
    v
}

/// Inverse of [`vectorize`].
pub fn unvectorize(v: &[f64], rows: usize, cols: usize) -> Result<DenseMatrix, LinalgError> {
    if v.len() != rows * cols {
        return Err(LinalgError::LengthMismatch {
            expected: rows * cols,
            actual: v.len(),
        });
    }
    Ok(DenseMatrix::from_fn(rows, cols, |i, j| v[j * rows + i]))
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky.
pub fn solve_spd(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NonSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    if b.len() != a.rows {
        return Err(LinalgError::LengthMismatch {
            expected: a.rows,
            actual: b.len(),
        });
    }
    let n = a.rows;
    let mat = nalgebra::DMatrix::from_row_slice(n, n, &a.data);
    let chol = nalgebra::linalg::Cholesky::new(mat).ok_or(LinalgError::NotPositiveDefinite)?;
    let x = chol.solve(&nalgebra::DVector::from_column_slice(b));
    Ok(x.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_symmetric(rng: &mut impl Rng, n: usize) -> DenseMatrix {
        random_matrix(rng, n, n).symmetrized()
    }

    fn orthonormality_error(q: &DenseMatrix) -> f64 {
        q.t_matmul(q).max_abs_diff(&DenseMatrix::identity(q.cols()))
    }

    #[test]
    fn eig_of_rank_one_two_by_two() {
        let m = DenseMatrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]);
        let e = sym_eig(&m).unwrap();
        assert_abs_diff_eq!(e.eigenvalues[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.eigenvalues[1], 1.0, epsilon = 1e-15);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let q = &e.eigenvectors;
        // null vector ±[1,-1]/√2, top vector ±[1,1]/√2
        assert_abs_diff_eq!(q[(0, 0)].abs(), h, epsilon = 1e-15);
        assert_abs_diff_eq!(q[(0, 0)] + q[(1, 0)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q[(0, 1)] - q[(1, 1)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q[(0, 1)].abs(), h, epsilon = 1e-15);
    }

    #[test]
    fn eig_of_identity() {
        let e = sym_eig(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0; 3]);
        assert!(orthonormality_error(&e.eigenvectors) <= 1e-15);
    }

    #[test]
    fn eig_reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_symmetric(&mut rng, 8);
        let e = sym_eig(&m).unwrap();
        assert!(e.reconstruct().max_abs_diff(&m) <= 1e-9 * m.max_abs().max(1.0));
        assert!(orthonormality_error(&e.eigenvectors) <= 1e-10);
        assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        let sum: f64 = e.eigenvalues.iter().sum();
        assert!((sum - m.trace()).abs() <= 1e-9 * 8.0 * m.max_abs());
    }

    #[test]
    fn eig_rejects_bad_input() {
        assert!(matches!(
            sym_eig(&DenseMatrix::zeros(2, 3)),
            Err(LinalgError::NonSquare { rows: 2, cols: 3 })
        ));
        let m = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0 + 1e-9, 1.0]]);
        assert!(matches!(sym_eig(&m), Err(LinalgError::AsymmetricInput { .. })));
    }

    #[test]
    fn eig_handles_moderate_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_symmetric(&mut rng, 120);
        let e = sym_eig(&m).unwrap();
        assert!(orthonormality_error(&e.eigenvectors) <= 1e-10);
        assert!(e.reconstruct().max_abs_diff(&m) <= 1e-9 * m.max_abs().max(1.0));
    }

    #[test]
    fn sign_flip_leaves_reconstruction_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_symmetric(&mut rng, 5);
        let e = sym_eig(&m).unwrap();
        let mut flipped = e.clone();
        for i in 0..5 {
            flipped.eigenvectors[(i, 2)] = -flipped.eigenvectors[(i, 2)];
        }
        assert_eq!(e.reconstruct(), flipped.reconstruct());
    }

    #[test]
    fn norms() {
        assert_abs_diff_eq!(
            frobenius_norm(&DenseMatrix::identity(2)),
            2f64.sqrt(),
            epsilon = 1e-15
        );
        assert_eq!(frobenius_norm(&DenseMatrix::zeros(3, 4)), 0.0);
        let s = DenseMatrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]);
        assert_abs_diff_eq!(spectral_norm_symmetric(&s).unwrap(), 1.0, epsilon = 1e-15);
        let asym = DenseMatrix::from_rows(&[[0.0, 1.0], [0.0, 0.0]]);
        assert!(spectral_norm_symmetric(&asym).is_err());
    }

    #[test]
    fn kron_block_layout() {
        let m = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let k = kron(&DenseMatrix::identity(2), &m).unwrap();
        let expected = DenseMatrix::from_rows(&[
            [1.0, 2.0, 0.0, 0.0],
            [3.0, 4.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 2.0],
            [0.0, 0.0, 3.0, 4.0],
        ]);
        assert_eq!(k, expected);
        let two = DenseMatrix::from_rows(&[[2.0]]);
        assert_eq!(kron(&two, &m).unwrap(), m.scale(2.0));
        let a = DenseMatrix::from_rows(&[[1.0, 2.0]]);
        let b = DenseMatrix::from_rows(&[[0.0], [1.0]]);
        assert_eq!(
            kron(&a, &b).unwrap(),
            DenseMatrix::from_rows(&[[0.0, 0.0], [1.0, 2.0]])
        );
    }

    #[test]
    fn kron_size_guard() {
        let big = DenseMatrix::zeros(10_001, 1);
        let err = kron(&big, &DenseMatrix::zeros(10_000, 1)).unwrap_err();
        assert!(matches!(err, LinalgError::SizeGuardExceeded { .. }));
    }

    #[test]
    fn kron_spectral_norm_is_multiplicative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = random_symmetric(&mut rng, 3);
            let b = random_symmetric(&mut rng, 3);
            let k = kron(&a, &b).unwrap();
            let lhs = spectral_norm_symmetric(&k).unwrap();
            let rhs = spectral_norm_symmetric(&a).unwrap() * spectral_norm_symmetric(&b).unwrap();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn vectorize_stacks_columns() {
        let m = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(vectorize(&m), vec![1.0, 3.0, 2.0, 4.0]);
        assert!(matches!(
            unvectorize(&[1.0, 2.0, 3.0], 2, 2),
            Err(LinalgError::LengthMismatch { expected: 4, actual: 3 })
        ));
    }

    #[test]
    fn vec_of_triple_product_matches_kron_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 3, 3);
            let b = random_matrix(&mut rng, 3, 3);
            let c = random_matrix(&mut rng, 3, 3);
            let lhs = vectorize(&a.matmul(&b).matmul(&c));
            let rhs = kron(&c.transpose(), &a).unwrap().matvec(&vectorize(&b));
            for (l, r) in lhs.iter().zip(&rhs) {
                assert_abs_diff_eq!(l, r, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_matrix(&mut rng, 4, 3);
        let b = random_matrix(&mut rng, 4, 5);
        let c = random_matrix(&mut rng, 6, 3);
        assert!(a.t_matmul(&b).max_abs_diff(&a.transpose().matmul(&b)) < 1e-14);
        assert!(a.matmul_t(&c).max_abs_diff(&a.matmul(&c.transpose())) < 1e-14);
    }

    #[test]
    fn spd_solve() {
        let a = DenseMatrix::from_rows(&[[4.0, 1.0], [1.0, 3.0]]);
        let x = solve_spd(&a, &[1.0, 2.0]).unwrap();
        let back = a.matvec(&x);
        assert_abs_diff_eq!(back[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(back[1], 2.0, epsilon = 1e-14);
        let indefinite = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
        assert_eq!(
            solve_spd(&indefinite, &[1.0, 1.0]),
            Err(LinalgError::NotPositiveDefinite)
        );
    }

    proptest! {
        #[test]
        fn unvectorize_inverts_vectorize(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, rows, cols);
            prop_assert_eq!(unvectorize(&vectorize(&m), rows, cols).unwrap(), m);
        }

        #[test]
        fn eigen_invariants_hold(n in 1usize..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_symmetric(&mut rng, n);
            let e = sym_eig(&m).unwrap();
            prop_assert!(orthonormality_error(&e.eigenvectors) <= 1e-10);
            prop_assert!(e.reconstruct().max_abs_diff(&m) <= 1e-9 * m.max_abs().max(1.0));
            prop_assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
            let sum: f64 = e.eigenvalues.iter().sum();
            prop_assert!((sum - m.trace()).abs() <= 1e-9 * n as f64 * m.max_abs().max(1e-300));
        }
    }
}
