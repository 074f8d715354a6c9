//! Statistical reduction of a symmetric-matrix-valued germ field:
//! empirical moments, the discrete Karhunen–Loève eigenproblem, and the
//! chaos representation `η = [y]ᵀΨ(ξ)` of the reduced coordinates.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::chaos::ChaosBasis;
use crate::error::{Error, Result};
use crate::field::SymField;
use crate::linalg::{symmetric_eigen, Matrix};
use crate::matalg::sym_vec_weights;
use crate::repclass::BoundContext;
use crate::stiefel::StiefelPoint;

/// Modes with `σ_i` below this fraction of `σ₁` are treated as numerically zero.
pub const RANK_TOL: f64 = 1e-12;

/// Realizations of a field sharing the same point set and matrix size.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RealizationSet {
    fields: Vec<SymField>,
}

impl RealizationSet {
    pub fn new(fields: Vec<SymField>) -> Result<Self> {
        if let Some(first) = fields.first() {
            if fields.iter().any(|f| f.n() != first.n() || f.points() != first.points()) {
                return Err(Error::Dimension("realizations differ in size".into()));
            }
        }
        Ok(Self { fields })
    }

    pub fn push(&mut self, f: SymField) -> Result<()> {
        if let Some(first) = self.fields.first() {
            if f.n() != first.n() || f.points() != first.points() {
                return Err(Error::Dimension("realization differs in size".into()));
            }
        }
        self.fields.push(f);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn n(&self) -> usize {
        self.fields.first().map_or(0, SymField::n)
    }

    pub fn points(&self) -> usize {
        self.fields.first().map_or(0, SymField::points)
    }

    pub fn get(&self, l: usize) -> &SymField {
        &self.fields[l]
    }

    pub fn fields(&self) -> &[SymField] {
        &self.fields
    }

    pub fn into_fields(self) -> Vec<SymField> {
        self.fields
    }

    pub fn mean(&self) -> Result<SymField> {
        let first = self.fields.first().ok_or_else(|| Error::InsufficientData("no realizations".into()))?;
        let mut mean = SymField::zeros(first.n(), first.points());
        let inv = 1.0 / self.len() as f64;
        for f in &self.fields {
            mean.axpy(inv, f);
        }
        Ok(mean)
    }
}

/// Sample mean and unbiased covariance. The covariance is dense over packed
/// coordinates: entry `(a·n_w + k, b·n_w + k')` couples channel `k` at point
/// `a` with channel `k'` at point `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: SymField,
    pub covariance: Matrix,
    pub count: usize,
}

pub fn estimate_moments(set: &RealizationSet) -> Result<Moments> {
    if set.len() < 2 {
        return Err(Error::InsufficientData(format!("{} realization(s); at least 2 needed", set.len())));
    }
    let mean = set.mean()?;
    let dim = mean.as_slice().len();
    let mut cov = Matrix::zeros(dim, dim);
    let mut centred = vec![0.0; dim];
    for f in set.fields() {
        for ((c, x), m) in centred.iter_mut().zip(f.as_slice()).zip(mean.as_slice()) {
            *c = x - m;
        }
        let data = cov.as_mut_slice();
        for i in 0..dim {
            let ci = centred[i];
            if ci == 0.0 {
                continue;
            }
            let row = &mut data[i * dim..(i + 1) * dim];
            for (r, cj) in row.iter_mut().zip(&centred) {
                *r += ci * cj;
            }
        }
    }
    let cov = cov.scale(1.0 / (set.len() - 1) as f64);
    Ok(Moments { mean, covariance: cov, count: set.len() })
}

/// Mean field, leading eigenvalues `σ₁ ≥ … ≥ σ_m > 0` and eigenfields
/// orthonormal under `⟪A, B⟫ = Σ_p q_p tr(A(p)B(p))`.
#[derive(Debug, Clone, PartialEq)]
pub struct KlBasis {
    mean: SymField,
    sigma: Vec<f64>,
    modes: Vec<SymField>,
    quad: Vec<f64>,
    total_variance: f64,
}

impl KlBasis {
    /// `total_variance` is the discrete `∫ E‖G − G₀‖²_F dx` of the source
    /// data, an upper bound for `Σσ_i`.
    pub fn new(mean: SymField, sigma: Vec<f64>, modes: Vec<SymField>, quad: Vec<f64>, total_variance: f64) -> Result<Self> {
        if sigma.len() != modes.len() {
            return Err(Error::Dimension("eigenvalue and eigenfield counts differ".into()));
        }
        if quad.len() != mean.points() || modes.iter().any(|g| g.points() != mean.points() || g.n() != mean.n()) {
            return Err(Error::Dimension("KL fields and quadrature disagree".into()));
        }
        if sigma.iter().any(|s| !(*s > 0.0)) || sigma.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Invariant("KL eigenvalues must be positive and descending".into()));
        }
        Ok(Self { mean, sigma, modes, quad, total_variance })
    }

    pub fn n(&self) -> usize {
        self.mean.n()
    }

    pub fn points(&self) -> usize {
        self.mean.points()
    }

    pub fn m(&self) -> usize {
        self.sigma.len()
    }

    pub fn mean(&self) -> &SymField {
        &self.mean
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn modes(&self) -> &[SymField] {
        &self.modes
    }

    pub fn mode(&self, i: usize) -> &SymField {
        &self.modes[i]
    }

    pub fn quad(&self) -> &[f64] {
        &self.quad
    }

    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    pub fn inner(&self, a: &SymField, b: &SymField) -> f64 {
        a.inner(b, &self.quad)
    }

    pub fn truncate(&self, m: usize) -> Result<KlBasis> {
        if m > self.m() {
            return Err(Error::TruncationOverflow { requested: m, available: self.m() });
        }
        Ok(KlBasis {
            mean: self.mean.clone(),
            sigma: self.sigma[..m].to_vec(),
            modes: self.modes[..m].to_vec(),
            quad: self.quad.clone(),
            total_variance: self.total_variance,
        })
    }

    /// Sup norms entering `δ`, taken over the field's points.
    pub fn bound_context(&self) -> BoundContext {
        BoundContext {
            g0_sup: self.mean.sup_norm(),
            mode_sup: self.sigma.iter().zip(&self.modes).map(|(s, g)| libm::sqrt(*s) * g.sup_norm()).collect(),
        }
    }

    /// `G₀ + Σ_i √σ_i G_i η_i`
    pub fn sample_g(&self, eta: &[f64]) -> SymField {
        assert_eq!(eta.len(), self.m(), "η length");
        let mut g = self.mean.clone();
        for ((s, mode), e) in self.sigma.iter().zip(&self.modes).zip(eta) {
            g.axpy(libm::sqrt(*s) * e, mode);
        }
        g
    }

    /// `η_i = ⟪G − G₀, G_i⟫/√σ_i`
    pub fn project(&self, g: &SymField) -> Result<Vec<f64>> {
        let s1 = self.sigma.first().copied().unwrap_or(0.0);
        let centred = g.sub(&self.mean);
        self.sigma
            .iter()
            .zip(&self.modes)
            .enumerate()
            .map(|(i, (s, mode))| {
                if !(*s >= RANK_TOL * s1) || *s <= 0.0 {
                    return Err(Error::DivisionGuard { index: i, value: *s });
                }
                Ok(self.inner(&centred, mode) / libm::sqrt(*s))
            })
            .collect()
    }

    /// `max_i ‖C D v_i − σ_i v_i‖_D / σ₁`, the relative discrete eigen-residual.
    pub fn eigen_residual(&self, moments: &Moments) -> f64 {
        let d = packed_weights(self.n(), &self.quad);
        let s1 = self.sigma.first().copied().unwrap_or(1.0);
        let mut worst = 0.0f64;
        for (s, mode) in self.sigma.iter().zip(&self.modes) {
            let dv: Vec<f64> = mode.as_slice().iter().zip(&d).map(|(v, w)| v * w).collect();
            let cdv = moments.covariance.matvec(&dv);
            let r: f64 = cdv.iter().zip(mode.as_slice()).zip(&d).map(|((c, v), w)| w * (c - s * v) * (c - s * v)).sum();
            worst = worst.max(libm::sqrt(r) / s1);
        }
        worst
    }
}

/// Per-coordinate weights `q_p·w_k` of the discrete inner product.
pub fn packed_weights(n: usize, quad: &[f64]) -> Vec<f64> {
    let w = sym_vec_weights(n);
    quad.iter().flat_map(|q| w.iter().map(move |wk| q * wk)).collect()
}

fn check_quad(quad: &[f64], points: usize) -> Result<()> {
    if quad.len() != points {
        return Err(Error::Dimension(format!("{} quadrature weights for {points} points", quad.len())));
    }
    if quad.iter().any(|q| !(*q > 0.0)) {
        return Err(Error::InvalidInput("quadrature weights must be positive".into()));
    }
    Ok(())
}

/// Orients each eigenvector so its largest-magnitude entry is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for x in v.iter() {
        if x.abs() > best + 1e-12 * best {
            best = x.abs();
            sign = if *x < 0.0 { -1.0 } else { 1.0 };
        }
    }
    if sign < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn rank_check(vals_desc: &[f64], m: usize) -> Result<()> {
    let s1 = vals_desc.first().copied().unwrap_or(0.0);
    let available = if s1 > 0.0 { vals_desc.iter().take_while(|&&s| s > RANK_TOL * s1).count() } else { 0 };
    if m > available {
        return Err(Error::TruncationOverflow { requested: m, available });
    }
    Ok(())
}

/// Nyström discretization of the covariance eigenproblem, symmetrized as
/// `D^{1/2} C D^{1/2}` with `D` the packed quadrature weights.
pub fn solve_kl(moments: &Moments, quad: &[f64], m: usize) -> Result<KlBasis> {
    let n = moments.mean.n();
    check_quad(quad, moments.mean.points())?;
    let d = packed_weights(n, quad);
    let dim = d.len();
    let sd: Vec<f64> = d.iter().map(|w| libm::sqrt(*w)).collect();
    let c = &moments.covariance;
    let s = Matrix::from_fn(dim, dim, |i, j| sd[i] * c[(i, j)] * sd[j]);
    let total_variance = (0..dim).map(|i| s[(i, i)]).sum();
    let (vals, vecs) = symmetric_eigen(&s)?;
    let desc: Vec<f64> = vals.iter().rev().copied().collect();
    rank_check(&desc, m)?;
    let mut sigma = Vec::with_capacity(m);
    let mut modes = Vec::with_capacity(m);
    for i in 0..m {
        let col = dim - 1 - i;
        let mut v: Vec<f64> = (0..dim).map(|r| vecs[(r, col)] / sd[r]).collect();
        fix_sign(&mut v);
        sigma.push(vals[col]);
        modes.push(SymField::from_packed(n, v)?);
    }
    KlBasis::new(moments.mean.clone(), sigma, modes, quad.to_vec(), total_variance)
}

/// The same eigenproblem through the `ν × ν` snapshot Gram matrix, for when
/// realizations are fewer than packed coordinates.
pub fn solve_kl_snapshots(set: &RealizationSet, quad: &[f64], m: usize) -> Result<KlBasis> {
    if set.len() < 2 {
        return Err(Error::InsufficientData(format!("{} realization(s); at least 2 needed", set.len())));
    }
    let n = set.n();
    check_quad(quad, set.points())?;
    let mean = set.mean()?;
    let d = packed_weights(n, quad);
    let nu = set.len();
    let scale = 1.0 / libm::sqrt((nu - 1) as f64);
    let centred: Vec<Vec<f64>> =
        set.fields().iter().map(|f| f.as_slice().iter().zip(mean.as_slice()).map(|(x, m)| (x - m) * scale).collect()).collect();
    let gram = Matrix::from_fn(nu, nu, |a, b| centred[a].iter().zip(&centred[b]).zip(&d).map(|((x, y), w)| w * x * y).sum());
    let total_variance = (0..nu).map(|a| gram[(a, a)]).sum();
    let (vals, vecs) = symmetric_eigen(&gram)?;
    let desc: Vec<f64> = vals.iter().rev().copied().collect();
    rank_check(&desc, m)?;
    let dim = d.len();
    let mut sigma = Vec::with_capacity(m);
    let mut modes = Vec::with_capacity(m);
    for i in 0..m {
        let col = nu - 1 - i;
        let s = vals[col];
        let mut v = vec![0.0; dim];
        for (a, x) in centred.iter().enumerate() {
            let u = vecs[(a, col)] / libm::sqrt(s);
            for (vk, xk) in v.iter_mut().zip(x) {
                *vk += u * xk;
            }
        }
        // re-normalize in the weighted norm against rounding in small σ
        let norm = libm::sqrt(v.iter().zip(&d).map(|(x, w)| w * x * x).sum::<f64>());
        v.iter_mut().for_each(|x| *x /= norm);
        fix_sign(&mut v);
        sigma.push(s);
        modes.push(SymField::from_packed(n, v)?);
    }
    KlBasis::new(mean, sigma, modes, quad.to_vec(), total_variance)
}

/// Picks the cheaper of the two discretizations.
pub fn kl_from_realizations(set: &RealizationSet, quad: &[f64], m: usize) -> Result<KlBasis> {
    let dim = set.points() * crate::matalg::sym_dim(set.n());
    if set.len() < dim {
        solve_kl_snapshots(set, quad, m)
    } else {
        solve_kl(&estimate_moments(set)?, quad, m)
    }
}

/// `η = [y]ᵀ Ψ(ξ)`
pub fn eta_from_psi(y: &StiefelPoint, psi: &[f64]) -> Vec<f64> {
    y.matrix().tr_matvec(psi)
}

pub fn eta_from_xi(y: &StiefelPoint, basis: &ChaosBasis, xi: &[f64]) -> Vec<f64> {
    eta_from_psi(y, &basis.eval(xi))
}

/// Reduced coordinates of every realization.
pub fn project_eta(set: &RealizationSet, kl: &KlBasis) -> Result<Vec<Vec<f64>>> {
    set.fields().iter().map(|g| kl.project(g)).collect()
}

/// `G^{(m,N)}(ξ) = G₀ + Σ √σ_i G_i η_i` with `η = [y]ᵀΨ(ξ)`.
pub fn sample_g(kl: &KlBasis, basis: &ChaosBasis, y: &StiefelPoint, xi: &[f64]) -> SymField {
    kl.sample_g(&eta_from_xi(y, basis, xi))
}

/// Sample mean vector and covariance matrix of a list of vectors.
pub fn sample_moments(samples: &[Vec<f64>]) -> (Vec<f64>, Matrix) {
    let m = samples.first().map_or(0, Vec::len);
    let count = samples.len() as f64;
    let mut mean = vec![0.0; m];
    for s in samples {
        for (a, b) in mean.iter_mut().zip(s) {
            *a += b / count;
        }
    }
    let mut cov = Matrix::zeros(m, m);
    for s in samples {
        for i in 0..m {
            for j in 0..m {
                cov[(i, j)] += (s[i] - mean[i]) * (s[j] - mean[j]) / (count - 1.0);
            }
        }
    }
    (mean, cov)
}
