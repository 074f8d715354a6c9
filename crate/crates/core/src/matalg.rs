//! Small symmetric matrices: spectral calculus, Cholesky and the
//! symmetric-matrix/vector bijection.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use crate::error::{Error, Result};
use crate::linalg::{jacobi_eigen, Matrix};

/// Jacobi stopping rule shared by every spectral routine in this module.
pub const EIGEN_TOL: f64 = 1e-13;
pub const EIGEN_MAX_SWEEPS: usize = 100;
/// Relative pivot floor of the SPD test.
pub const SPD_PIVOT_TOL: f64 = 1e-14;

/// Real symmetric `n × n` matrix, stored in full and kept exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Self::zeros(n);
        for (i, &v) in d.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    /// Builds the matrix from its upper triangle: `f(i, j)` is queried for `i ≤ j`.
    pub fn from_upper(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for j in 0..n {
            for i in 0..=j {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// Symmetrizes `(A + Aᵀ)/2`.
    pub fn from_matrix(a: &Matrix) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::Dimension(format!("{}x{} is not square", a.rows(), a.cols())));
        }
        let n = a.rows();
        Ok(Self::from_upper(n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)])))
    }

    /// Row-major entries; the lower triangle is mirrored from the upper one.
    pub fn from_rows(n: usize, rows: &[f64]) -> Result<Self> {
        if rows.len() != n * n {
            return Err(Error::Dimension(format!("{} entries for n = {n}", rows.len())));
        }
        Ok(Self::from_upper(n, |i, j| rows[i * n + j]))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_row_major(self.n, self.n, self.data.clone()).expect("square storage")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn frobenius_dot(&self, other: &SymMatrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        assert_eq!(self.n, other.n);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        SymMatrix { n: self.n, data }
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        assert_eq!(self.n, other.n);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        SymMatrix { n: self.n, data }
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix { n: self.n, data: self.data.iter().map(|v| v * s).collect() }
    }

    /// `self + s·other`
    pub fn add_scaled(&mut self, s: f64, other: &SymMatrix) {
        assert_eq!(self.n, other.n);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// `self · other`, symmetrized (exact when the two commute).
    pub fn sym_product(&self, other: &SymMatrix) -> SymMatrix {
        let p = self.to_matrix().matmul(&other.to_matrix());
        SymMatrix::from_matrix(&p).expect("square")
    }

    pub fn eigen(&self) -> Result<SpectralDecomp> {
        SpectralDecomp::new(self)
    }

    /// Largest absolute eigenvalue.
    pub fn spectral_norm(&self) -> Result<f64> {
        let d = self.eigen()?;
        Ok(d.eigvals.iter().fold(0.0f64, |m, v| m.max(v.abs())))
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(self.eigen()?.eigvals.first().copied().unwrap_or(f64::INFINITY))
    }

    pub fn max_eigenvalue(&self) -> Result<f64> {
        Ok(self.eigen()?.eigvals.last().copied().unwrap_or(f64::NEG_INFINITY))
    }

    pub fn max_abs_diff(&self, other: &SymMatrix) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }
}

/// Symmetric positive-definite matrix. Construction runs the Cholesky test.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(SymMatrix);

impl SpdMatrix {
    pub fn new(m: SymMatrix) -> Result<Self> {
        chol_upper(&m)?;
        Ok(Self(m))
    }

    pub fn identity(n: usize) -> Self {
        Self(SymMatrix::identity(n))
    }

    /// Wraps a matrix whose positivity is known from how it was built
    /// (a spectral map with positive values, or a congruence of an SPD matrix).
    pub(crate) fn from_construction(m: SymMatrix) -> Self {
        Self(m)
    }

    pub fn as_sym(&self) -> &SymMatrix {
        &self.0
    }

    pub fn into_sym(self) -> SymMatrix {
        self.0
    }

    pub fn inverse(&self) -> Result<SpdMatrix> {
        let d = self.eigen()?;
        Ok(SpdMatrix(d.map(|l| 1.0 / l)))
    }
}

impl Deref for SpdMatrix {
    type Target = SymMatrix;
    fn deref(&self) -> &SymMatrix {
        &self.0
    }
}

/// Upper-triangular factor; entries below the diagonal are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct UpperTriangular {
    n: usize,
    data: Vec<f64>,
}

impl UpperTriangular {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_row_major(self.n, self.n, self.data.clone()).expect("square storage")
    }

    /// Builds `U` from its upper triangle; `f(i, j)` is queried for `i ≤ j`.
    pub fn from_upper(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                data[i * n + j] = f(i, j);
            }
        }
        Self { n, data }
    }

    /// `UᵀU`.
    pub fn gram(&self) -> SymMatrix {
        let n = self.n;
        SymMatrix::from_upper(n, |i, j| (0..=i.min(j)).map(|k| self.get(k, i) * self.get(k, j)).sum())
    }

    /// `Uᵀ A U`.
    pub fn congruence(&self, a: &SymMatrix) -> SymMatrix {
        let u = self.to_matrix();
        let p = u.transpose().matmul(&a.to_matrix()).matmul(&u);
        SymMatrix::from_matrix(&p).expect("square")
    }

    /// `U⁻ᵀ A U⁻¹`, computed with two triangular solves per column.
    pub fn inverse_congruence(&self, a: &SymMatrix) -> SymMatrix {
        let n = self.n;
        // X = U⁻ᵀ A, column by column (Uᵀ is lower triangular).
        let mut x = Matrix::zeros(n, n);
        for c in 0..n {
            let col: Vec<f64> = (0..n).map(|r| a.get(r, c)).collect();
            let s = self.solve_transposed(&col);
            for r in 0..n {
                x[(r, c)] = s[r];
            }
        }
        // Y = X U⁻¹  ⇔  Yᵀ = U⁻ᵀ Xᵀ.
        let mut y = Matrix::zeros(n, n);
        for r in 0..n {
            let s = self.solve_transposed(x.row(r));
            for c in 0..n {
                y[(r, c)] = s[c];
            }
        }
        SymMatrix::from_matrix(&y).expect("square")
    }

    /// Solve `U x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.get(i, k) * x[k];
            }
            x[i] = s / self.get(i, i);
        }
        x
    }

    /// Solve `Uᵀ x = b`.
    pub fn solve_transposed(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.get(k, i) * x[k];
            }
            x[i] = s / self.get(i, i);
        }
        x
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }
}

/// `A = Q Λ Qᵀ` with ascending eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomp {
    pub eigvals: Vec<f64>,
    pub eigvecs: Matrix,
}

impl SpectralDecomp {
    pub fn new(a: &SymMatrix) -> Result<Self> {
        if !a.is_finite() {
            return Err(Error::InvalidInput("non-finite symmetric matrix".into()));
        }
        let (eigvals, eigvecs) = jacobi_eigen(&a.to_matrix(), EIGEN_TOL, EIGEN_MAX_SWEEPS)?;
        Ok(Self { eigvals, eigvecs })
    }

    /// `Q f(Λ) Qᵀ`, assembled on the upper triangle so the result is exactly symmetric.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> SymMatrix {
        let n = self.eigvals.len();
        let fl: Vec<f64> = self.eigvals.iter().map(|&l| f(l)).collect();
        let q = &self.eigvecs;
        SymMatrix::from_upper(n, |i, j| (0..n).map(|k| q[(i, k)] * fl[k] * q[(j, k)]).sum())
    }
}

/// Matrix exponential of a symmetric matrix.
pub fn sym_exp(g: &SymMatrix) -> Result<SpdMatrix> {
    let d = SpectralDecomp::new(g)?;
    if d.eigvals.iter().any(|&l| {
        let e = libm::exp(l);
        e == 0.0 || !e.is_finite()
    }) {
        return Err(Error::InvalidInput("matrix exponential out of floating-point range".into()));
    }
    Ok(SpdMatrix::from_construction(d.map(libm::exp)))
}

/// Principal matrix logarithm of an SPD matrix.
pub fn sym_log(k0: &SymMatrix) -> Result<SymMatrix> {
    chol_upper(k0)?;
    let d = SpectralDecomp::new(k0)?;
    if let Some(i) = d.eigvals.iter().position(|&l| l <= 0.0) {
        return Err(Error::NotPositiveDefinite { pivot: i });
    }
    Ok(d.map(libm::log))
}

/// Upper Cholesky factor `U` with `UᵀU = K` and positive diagonal.
pub fn chol_upper(k: &SymMatrix) -> Result<UpperTriangular> {
    let n = k.n();
    if !k.is_finite() {
        return Err(Error::InvalidInput("non-finite matrix entry".into()));
    }
    let floor = SPD_PIVOT_TOL * k.trace().abs();
    let mut u = UpperTriangular { n, data: vec![0.0; n * n] };
    for j in 0..n {
        let mut s = k.get(j, j);
        for p in 0..j {
            s -= u.data[p * n + j] * u.data[p * n + j];
        }
        if !(s > floor) {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let ujj = libm::sqrt(s);
        u.data[j * n + j] = ujj;
        for c in j + 1..n {
            let mut s = k.get(j, c);
            for p in 0..j {
                s -= u.data[p * n + j] * u.data[p * n + c];
            }
            u.data[j * n + c] = s / ujj;
        }
    }
    Ok(u)
}

/// `n(n+1)/2`
pub const fn sym_dim(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Inverse of [`sym_dim`], if `n_w` is a triangular number.
pub fn n_from_sym_dim(n_w: usize) -> Option<usize> {
    let mut n = 0;
    while sym_dim(n) < n_w {
        n += 1;
    }
    (sym_dim(n) == n_w).then_some(n)
}

/// Zero-based position of entry `(i, j)`, `i ≤ j`, in the packed vector.
/// One-based this is `k = i + j(j−1)/2`.
#[inline]
pub const fn sym_index(i: usize, j: usize) -> usize {
    i + j * (j + 1) / 2
}

/// Packs the upper triangle column by column.
pub fn sym_vec(g: &SymMatrix) -> Vec<f64> {
    let n = g.n();
    let mut w = vec![0.0; sym_dim(n)];
    for j in 0..n {
        for i in 0..=j {
            w[sym_index(i, j)] = g.get(i, j);
        }
    }
    w
}

pub fn vec_sym(n: usize, w: &[f64]) -> Result<SymMatrix> {
    if w.len() != sym_dim(n) {
        return Err(Error::Dimension(format!("{} packed entries for n = {n}", w.len())));
    }
    Ok(SymMatrix::from_upper(n, |i, j| w[sym_index(i, j)]))
}

/// Weight of packed entry `k` in the Frobenius inner product: 1 on the
/// diagonal, 2 off it (each off-diagonal entry appears twice in the matrix).
pub fn sym_vec_weights(n: usize) -> Vec<f64> {
    let mut w = vec![2.0; sym_dim(n)];
    for i in 0..n {
        w[sym_index(i, i)] = 1.0;
    }
    w
}
