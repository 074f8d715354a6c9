//! Minimal parametrizations of the compact Stiefel manifold `V_m(ℝ^N)`
//! around a base point `[a]`, through a tangent vector `z ∈ ℝ^ν` with
//! `ν = mN − m(m+1)/2`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, HouseholderQr, Matrix};

/// Orthonormality tolerance `‖yᵀy − I‖_F` accepted for a point.
pub const MANIFOLD_TOL: f64 = 1e-10;

/// An `N × m` matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    y: Matrix,
}

impl StiefelPoint {
    pub fn new(y: Matrix) -> Result<Self> {
        if y.cols() > y.rows() {
            return Err(Error::Dimension(format!("{} columns exceed {} rows", y.cols(), y.rows())));
        }
        let res = y.orthonormality_residual();
        if !(res <= MANIFOLD_TOL) {
            return Err(Error::Invariant(format!("Stiefel residual {res:e} above {MANIFOLD_TOL:e}")));
        }
        Ok(Self { y })
    }

    /// `[I_{N,m}]`, the first `m` columns of the identity.
    pub fn canonical(n: usize, m: usize) -> Result<Self> {
        if m > n {
            return Err(Error::Dimension(format!("m = {m} exceeds N = {n}")));
        }
        Ok(Self { y: Matrix::eye(n, m) })
    }

    /// The orthonormal polar factor `A(AᵀA)^{-1/2}` of a full-column-rank `A`,
    /// i.e. the nearest point on the manifold in the Frobenius norm.
    pub fn polar(a: &Matrix) -> Result<Self> {
        let gram = a.tr_matmul(a);
        let (vals, vecs) = symmetric_eigen(&gram)?;
        let top = vals.last().copied().unwrap_or(0.0);
        if vals.first().is_none_or(|&v| !(v > 1e-14 * top)) {
            return Err(Error::RankDeficient("polar factor of a rank-deficient matrix".into()));
        }
        let m = gram.rows();
        let inv_sqrt = Matrix::from_fn(m, m, |i, j| (0..m).map(|k| vecs[(i, k)] * vecs[(j, k)] / libm::sqrt(vals[k])).sum());
        Self::new(a.matmul(&inv_sqrt))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.y
    }

    pub fn into_matrix(self) -> Matrix {
        self.y
    }

    /// `N`
    pub fn rows(&self) -> usize {
        self.y.rows()
    }

    /// `m`
    pub fn m(&self) -> usize {
        self.y.cols()
    }

    pub fn residual(&self) -> f64 {
        self.y.orthonormality_residual()
    }
}

/// `ν = mN − m(m+1)/2`
pub const fn tangent_dim(n: usize, m: usize) -> usize {
    m * n - m * (m + 1) / 2
}

/// `z ↦ ([A], [B])`: `A` is `m × m` skew with its strict upper triangle filled
/// column by column, `B` is `(N−m) × m` filled column-major from the rest.
pub fn pack_s(z: &[f64], m: usize, n: usize) -> Result<(Matrix, Matrix)> {
    if m > n || z.len() != tangent_dim(n, m) {
        return Err(Error::Dimension(format!("|z| = {} for N = {n}, m = {m} (expected {})", z.len(), tangent_dim(n, m.min(n)))));
    }
    let mut a = Matrix::zeros(m, m);
    for j in 1..m {
        for i in 0..j {
            let v = z[i + j * (j - 1) / 2];
            a[(i, j)] = v;
            a[(j, i)] = -v;
        }
    }
    let off = m * m.saturating_sub(1) / 2;
    let r = n - m;
    let b = Matrix::from_fn(r, m, |i, j| z[off + i + j * r]);
    Ok((a, b))
}

pub fn unpack_s(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let m = a.rows();
    let r = b.rows();
    let off = m * m.saturating_sub(1) / 2;
    let mut z = vec![0.0; off + r * m];
    for j in 1..m {
        for i in 0..j {
            z[i + j * (j - 1) / 2] = a[(i, j)];
        }
    }
    for j in 0..m {
        for i in 0..r {
            z[off + i + j * r] = b[(i, j)];
        }
    }
    z
}

/// Exponential of a skew-symmetric matrix `S`.
///
/// With `−S² = V Θ² Vᵀ`, `exp(S) = V cos Θ Vᵀ + S·V sinc Θ Vᵀ`, which only needs
/// a symmetric eigensolver and is orthogonal to rounding.
pub fn skew_exp(s: &Matrix) -> Result<Matrix> {
    let r = s.rows();
    if s.cols() != r {
        return Err(Error::Dimension("skew exponential of a non-square matrix".into()));
    }
    if r == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let neg_sq = s.tr_matmul(s);
    let (vals, v) = symmetric_eigen(&neg_sq)?;
    let theta: Vec<f64> = vals.iter().map(|&l| libm::sqrt(l.max(0.0))).collect();
    let cos: Vec<f64> = theta.iter().map(|&t| libm::cos(t)).collect();
    let sinc: Vec<f64> = theta.iter().map(|&t| if t < 1e-8 { 1.0 - t * t / 6.0 } else { libm::sin(t) / t }).collect();
    let f = |d: &[f64]| Matrix::from_fn(r, r, |i, j| (0..r).map(|k| v[(i, k)] * d[k] * v[(j, k)]).sum());
    Ok(f(&cos).add(&s.matmul(&f(&sinc))))
}

/// `[a_⊥]`: the last `N − m` columns of the full orthogonal factor of the QR
/// decomposition of `[a]`.
pub fn orth_complement(a: &StiefelPoint) -> Result<Matrix> {
    let qr = checked_qr(a)?;
    let q = qr.full_q();
    let (n, m) = (a.rows(), a.m());
    Ok(q.block(0, m, n, n - m))
}

fn checked_qr(a: &StiefelPoint) -> Result<HouseholderQr> {
    let qr = HouseholderQr::new(a.matrix());
    for i in 0..a.m() {
        if !(qr.r()[(i, i)] > 1e-10) {
            return Err(Error::RankDeficient(format!("column {i} of the base point")));
        }
    }
    Ok(qr)
}

/// `[y] = [a a_⊥]·exp(t[[A, −Bᵀ],[B, 0]])·[I_{N,m}]`, the `O(N³)` form.
pub fn map_full(a: &StiefelPoint, z: &[f64], t: f64) -> Result<StiefelPoint> {
    let (n, m) = (a.rows(), a.m());
    let (sa, sb) = pack_s(z, m, n)?;
    let qr = checked_qr(a)?;
    let mut basis = qr.full_q();
    // the first m columns of Q equal [a] up to rounding; use [a] itself
    for i in 0..n {
        for j in 0..m {
            basis[(i, j)] = a.matrix()[(i, j)];
        }
    }
    let mut s = Matrix::zeros(n, n);
    s.set_block(0, 0, &sa.scale(t));
    s.set_block(m, 0, &sb.scale(t));
    s.set_block(0, m, &sb.transpose().scale(-t));
    let e = skew_exp(&s)?;
    Ok(StiefelPoint { y: basis.matmul(&e.block(0, 0, n, m)) })
}

/// Reduced evaluation of the same map at `O(Nm²)` cost per point once the
/// base point's QR factorization is cached.
#[derive(Debug, Clone)]
pub struct StiefelChart {
    base: StiefelPoint,
    qr: HouseholderQr,
    t: f64,
}

impl StiefelChart {
    pub fn new(base: StiefelPoint, t: f64) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidInput(format!("step scale t must be positive, got {t}")));
        }
        let qr = checked_qr(&base)?;
        Ok(Self { base, qr, t })
    }

    pub fn base(&self) -> &StiefelPoint {
        &self.base
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn tangent_dim(&self) -> usize {
        tangent_dim(self.base.rows(), self.base.m())
    }

    /// With `B = Q_B R_B` (thin QR, `k = min(N−m, m)` columns) and
    /// `Q = a_⊥ Q_B`, `[y] = [a Q]·exp(t[[A, −R_Bᵀ],[R_B, 0]])·[I_{m+k,m}]`.
    pub fn map(&self, z: &[f64]) -> Result<StiefelPoint> {
        let (n, m) = (self.base.rows(), self.base.m());
        let (sa, sb) = pack_s(z, m, n)?;
        let k = (n - m).min(m);
        let a = self.base.matrix();
        if k == 0 {
            let e = skew_exp(&sa.scale(self.t))?;
            return Ok(StiefelPoint { y: a.matmul(&e) });
        }
        let qb = HouseholderQr::new(&sb);
        let rb = qb.r().block(0, 0, k, m);
        let mut lifted = Matrix::zeros(n, k);
        lifted.set_block(m, 0, &qb.thin_q());
        self.qr.apply_q(&mut lifted);
        let mut s = Matrix::zeros(m + k, m + k);
        s.set_block(0, 0, &sa.scale(self.t));
        s.set_block(m, 0, &rb.scale(self.t));
        s.set_block(0, m, &rb.transpose().scale(-self.t));
        let e = skew_exp(&s)?;
        let y = a.matmul(&e.block(0, 0, m, m)).add(&lifted.matmul(&e.block(m, 0, k, m)));
        Ok(StiefelPoint { y })
    }
}

pub fn map_reduced(a: &StiefelPoint, z: &[f64], t: f64) -> Result<StiefelPoint> {
    StiefelChart::new(a.clone(), t)?.map(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, stream};

    fn random_point(n: usize, m: usize, seed: u64) -> StiefelPoint {
        let mut rng = stream(seed, "stiefel-test", 0);
        let g = Matrix::from_row_major(n, m, normal_vec(&mut rng, n * m)).unwrap();
        StiefelPoint::new(HouseholderQr::new(&g).thin_q()).unwrap()
    }

    #[test]
    fn pack_layout() {
        let (a, b) = pack_s(&[0.7, 1.0, 2.0, 3.0, 4.0], 2, 4).unwrap();
        assert_eq!(a.as_slice(), &[0.0, 0.7, -0.7, 0.0]);
        assert_eq!(b.as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(unpack_s(&a, &b), vec![0.7, 1.0, 2.0, 3.0, 4.0]);
        let (a, b) = pack_s(&[0.0; 5], 2, 4).unwrap();
        assert_eq!(a.frobenius_norm() + b.frobenius_norm(), 0.0);
        assert!(pack_s(&[0.0; 4], 2, 4).is_err());
    }

    #[test]
    fn unpack_inverts_pack_for_odd_shapes() {
        for (n, m) in [(5, 1), (5, 3), (3, 3), (6, 2)] {
            let z: Vec<f64> = (0..tangent_dim(n, m)).map(|k| k as f64 * 0.37 - 1.0).collect();
            let (a, b) = pack_s(&z, m, n).unwrap();
            assert_eq!(unpack_s(&a, &b), z);
        }
    }

    #[test]
    fn plane_rotation() {
        let a = StiefelPoint::canonical(2, 1).unwrap();
        let (theta, t) = (0.8, 2.0);
        for y in [map_full(&a, &[theta / t], t).unwrap(), map_reduced(&a, &[theta / t], t).unwrap()] {
            assert!((y.matrix()[(0, 0)] - libm::cos(theta)).abs() < 1e-14);
            assert!((y.matrix()[(1, 0)] - libm::sin(theta)).abs() < 1e-14);
        }
    }

    #[test]
    fn complement_identities() {
        let a = random_point(9, 3, 4);
        let c = orth_complement(&a).unwrap();
        assert!(c.orthonormality_residual() < 1e-12);
        assert!(c.tr_matmul(a.matrix()).frobenius_norm() < 1e-12);
        let proj = a.matrix().matmul(&a.matrix().transpose()).add(&c.matmul(&c.transpose()));
        assert!(proj.max_abs_diff(&Matrix::identity(9)) < 1e-12);
    }

    #[test]
    fn square_case_has_empty_complement() {
        let a = random_point(3, 3, 7);
        assert_eq!(orth_complement(&a).unwrap().cols(), 0);
        let z = [0.2, -0.4, 0.9];
        let full = map_full(&a, &z, 1.0).unwrap();
        let (sa, _) = pack_s(&z, 3, 3).unwrap();
        let expected = a.matrix().matmul(&skew_exp(&sa).unwrap());
        assert!(full.matrix().max_abs_diff(&expected) < 1e-12);
        assert!(map_reduced(&a, &z, 1.0).unwrap().matrix().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn zero_tangent_returns_base() {
        let a = random_point(12, 3, 1);
        let z = vec![0.0; tangent_dim(12, 3)];
        assert!(map_full(&a, &z, 1.0).unwrap().matrix().max_abs_diff(a.matrix()) <= 1e-12);
        assert!(map_reduced(&a, &z, 1.0).unwrap().matrix().max_abs_diff(a.matrix()) <= 1e-12);
    }

    #[test]
    fn maps_agree_and_stay_on_manifold() {
        for (seed, (n, m)) in [(10, 2), (7, 5), (15, 4), (4, 3)].into_iter().enumerate() {
            let a = random_point(n, m, seed as u64);
            let mut rng = stream(99, "z", seed as u64);
            let z = normal_vec(&mut rng, tangent_dim(n, m));
            let f = map_full(&a, &z, 1.0).unwrap();
            let r = map_reduced(&a, &z, 1.0).unwrap();
            assert!(f.residual() < 1e-12 && r.residual() < 1e-12);
            assert!(f.matrix().max_abs_diff(r.matrix()) < 1e-10, "{n} {m}");
        }
    }

    #[test]
    fn polar_factor_is_nearest_for_orthogonal_input() {
        let a = random_point(6, 2, 3);
        assert!(StiefelPoint::polar(a.matrix()).unwrap().matrix().max_abs_diff(a.matrix()) < 1e-12);
        let p = StiefelPoint::polar(&a.matrix().scale(3.0)).unwrap();
        assert!(p.matrix().max_abs_diff(a.matrix()) < 1e-12);
    }
}
