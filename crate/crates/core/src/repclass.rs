//! Lower-bounded SPD fields: the normalization `K = L̲ᵀ(εI + K₀)L̲/(1+ε)`,
//! the exponential and square representations of `K₀` through a symmetric
//! germ `G`, the squash functions used on the square representation's
//! diagonal, and the bound functionals built on top of them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::field::SymField;
use crate::matalg::{chol_upper, sym_exp, sym_log, SpdMatrix, SymMatrix, UpperTriangular};
use crate::mesh::Mesh;
use crate::special::{gamma_p, gamma_p_inv, gamma_q, gamma_q_inv, normal_cdf, normal_quantile, normal_quantile_upper, normal_sf};

/// Largest `|g/s|` at which the normal tail is still representable; the
/// certificate grid never extends beyond it.
pub const APM_MAX_STANDARD_SCORE: f64 = 37.0;

/// `h^APM(g; a) = 2s²·F⁻¹_{Γ_a}(Φ(g/s))`.
///
/// Each half line uses the tail on its own side so that neither `Φ` nor the
/// Gamma quantile loses precision to cancellation.
pub fn h_apm(g: f64, a: f64, s: f64) -> Result<f64> {
    if !g.is_finite() || !(a > 0.0) || !(s > 0.0) {
        return Err(Error::InvalidInput(format!("h_apm(g = {g}, a = {a}, s = {s})")));
    }
    let w = g / s;
    let x = if w <= 0.0 {
        let p = normal_cdf(w);
        if p < f64::MIN_POSITIVE {
            return Err(saturation(g, "normal CDF underflows"));
        }
        gamma_p_inv(a, p)?
    } else {
        let q = normal_sf(w);
        if q < f64::MIN_POSITIVE {
            return Err(saturation(g, "normal tail underflows"));
        }
        gamma_q_inv(a, q)?
    };
    let v = 2.0 * s * s * x;
    if !(v > 0.0) || !v.is_finite() {
        return Err(saturation(g, "Gamma quantile leaves the floating-point range"));
    }
    Ok(v)
}

/// `s·Φ⁻¹(F_{Γ_a}(v/(2s²)))`, the inverse of [`h_apm`].
pub fn h_apm_inv(v: f64, a: f64, s: f64) -> Result<f64> {
    if !(v > 0.0) || !v.is_finite() || !(a > 0.0) || !(s > 0.0) {
        return Err(Error::InvalidInput(format!("h_apm_inv(v = {v}, a = {a}, s = {s})")));
    }
    let x = v / (2.0 * s * s);
    let p = gamma_p(a, x)?;
    let w = if p <= 0.5 {
        if p < f64::MIN_POSITIVE {
            return Err(saturation(v, "Gamma CDF underflows"));
        }
        normal_quantile(p)
    } else {
        let q = gamma_q(a, x)?;
        if q < f64::MIN_POSITIVE {
            return Err(saturation(v, "Gamma tail underflows"));
        }
        normal_quantile_upper(q)
    };
    Ok(s * w)
}

fn saturation(g: f64, detail: &str) -> Error {
    Error::Saturation { g, detail: detail.into() }
}

/// `h(g; a) = a(g + √(g²+1))`, an algebraically simple admissible squash.
pub fn h_softabs(g: f64, a: f64) -> f64 {
    a * (g + libm::sqrt(g * g + 1.0))
}

pub fn h_softabs_inv(v: f64, a: f64) -> f64 {
    let t = v / a;
    0.5 * (t - 1.0 / t)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SquashKind {
    /// Gaussian-to-Gamma quantile squash with dispersion `δ` and `s = δ/√(n+1)`.
    Apm {
        dispersion: f64,
        s: f64,
    },
    SoftAbs,
}

/// The diagonal squash of the square representation together with its
/// growth certificate `h(g; a_j) ≤ c_{a_j} + c_h g²`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquashFunction {
    kind: SquashKind,
    a: Vec<f64>,
    c_h: f64,
    c_a: Vec<f64>,
}

impl SquashFunction {
    /// The APM squash for `n × n` fields: `a_j = 1/(2s²) + (1 − j)/2`.
    ///
    /// The certificate is computed on the representable range
    /// `|g| ≤ 37 s`, shortened when a Gamma quantile underflows first: `c_h` is the secant slope `h(g_max)/g_max²` (at least 1,
    /// the asymptotic ratio), and `c_{a_j}` bounds `h − c_h g²` between
    /// consecutive grid points using the monotonicity of `h`.
    pub fn apm(n: usize, dispersion: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("matrix size must be positive".into()));
        }
        let upper = if n == 1 { f64::INFINITY } else { libm::sqrt((n as f64 + 1.0) / (n as f64 - 1.0)) };
        if !(dispersion > 0.0 && dispersion < upper) {
            return Err(Error::Domain(format!("dispersion {dispersion} outside (0, {upper}) for n = {n}")));
        }
        let s = dispersion / libm::sqrt(n as f64 + 1.0);
        let a: Vec<f64> = (1..=n).map(|j| 1.0 / (2.0 * s * s) + (1.0 - j as f64) / 2.0).collect();
        // Small shape parameters push the lower Gamma quantile below the
        // subnormal range before the normal tail underflows; shrink the
        // certified range to where every diagonal squash is representable.
        let mut wmax = APM_MAX_STANDARD_SCORE;
        while a.iter().any(|&aj| h_apm(-wmax * s, aj, s).is_err() || h_apm(wmax * s, aj, s).is_err()) {
            wmax -= 0.5;
            if wmax < 3.0 {
                return Err(Error::Domain(format!("APM squash with dispersion {dispersion} saturates near the origin")));
            }
        }
        let gmax = wmax * s;
        let steps = 1480;
        let grid: Vec<f64> = (0..=steps).map(|k| -gmax + 2.0 * gmax * k as f64 / steps as f64).collect();
        let mut c_h = 1.0f64;
        let mut values = Vec::with_capacity(a.len());
        for &aj in &a {
            let h: Vec<f64> = grid.iter().map(|&g| h_apm(g, aj, s)).collect::<Result<_>>()?;
            c_h = c_h.max(h[steps] / (gmax * gmax)).max(h[0] / (gmax * gmax));
            values.push(h);
        }
        let c_a = values
            .iter()
            .map(|h| {
                let mut worst = f64::NEG_INFINITY;
                for k in 0..steps {
                    let (g0, g1) = (grid[k], grid[k + 1]);
                    let closest_sq = if g0 <= 0.0 && g1 >= 0.0 { 0.0 } else { (g0 * g0).min(g1 * g1) };
                    worst = worst.max(h[k + 1] - c_h * closest_sq);
                }
                worst * (1.0 + 1e-9)
            })
            .collect();
        Ok(Self { kind: SquashKind::Apm { dispersion, s }, a, c_h, c_a })
    }

    /// Softabs squash with per-diagonal parameters `a_j > 0`; `c_{a_j} = 2a_j`
    /// and `c_h = max_j a_j`.
    pub fn softabs(a: Vec<f64>) -> Result<Self> {
        if a.is_empty() || a.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("softabs parameters must be positive".into()));
        }
        let c_h = a.iter().copied().fold(0.0, f64::max);
        let c_a = a.iter().map(|v| 2.0 * v).collect();
        Ok(Self { kind: SquashKind::SoftAbs, a, c_h, c_a })
    }

    pub fn kind(&self) -> &SquashKind {
        &self.kind
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn c_h(&self) -> f64 {
        self.c_h
    }

    pub fn c_a(&self) -> &[f64] {
        &self.c_a
    }

    /// `γ₀ = Σ_j c_{a_j}`
    pub fn gamma0(&self) -> f64 {
        self.c_a.iter().sum()
    }

    /// `γ₁ = max(c_h, 1/2)`
    pub fn gamma1(&self) -> f64 {
        self.c_h.max(0.5)
    }

    /// `h(g; a_j)` for diagonal index `j` (zero-based).
    pub fn h(&self, j: usize, g: f64) -> Result<f64> {
        match self.kind {
            SquashKind::Apm { s, .. } => h_apm(g, self.a[j], s),
            SquashKind::SoftAbs => {
                if !g.is_finite() {
                    return Err(Error::InvalidInput("non-finite squash argument".into()));
                }
                Ok(h_softabs(g, self.a[j]))
            }
        }
    }

    pub fn h_inv(&self, j: usize, v: f64) -> Result<f64> {
        match self.kind {
            SquashKind::Apm { s, .. } => h_apm_inv(v, self.a[j], s),
            SquashKind::SoftAbs => {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::InvalidInput(format!("softabs inverse of {v}")));
                }
                Ok(h_softabs_inv(v, self.a[j]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RepKind {
    Exponential,
    Square(SquashFunction),
}

impl RepKind {
    pub fn is_square(&self) -> bool {
        matches!(self, RepKind::Square(_))
    }
}

/// `G ↦ K₀`: `exp(G)` or `LᵀL` with `L` built from `G` and the squash.
pub fn rep_forward(kind: &RepKind, g: &SymMatrix) -> Result<SpdMatrix> {
    match kind {
        RepKind::Exponential => sym_exp(g),
        RepKind::Square(h) => {
            let n = g.n();
            if h.n() != n {
                return Err(Error::Dimension(format!("squash for n = {}, field n = {n}", h.n())));
            }
            let mut diag = Vec::with_capacity(n);
            for j in 0..n {
                diag.push(libm::sqrt(h.h(j, g.get(j, j))?));
            }
            let l = UpperTriangular::from_upper(n, |i, j| if i == j { diag[i] } else { g.get(i, j) });
            Ok(SpdMatrix::from_construction(l.gram()))
        }
    }
}

/// `K₀ ↦ G`, the reciprocal of [`rep_forward`].
pub fn rep_inverse(kind: &RepKind, k0: &SymMatrix) -> Result<SymMatrix> {
    match kind {
        RepKind::Exponential => sym_log(k0),
        RepKind::Square(h) => {
            let n = k0.n();
            if h.n() != n {
                return Err(Error::Dimension(format!("squash for n = {}, field n = {n}", h.n())));
            }
            let u = chol_upper(k0)?;
            let mut diag = Vec::with_capacity(n);
            for j in 0..n {
                diag.push(h.h_inv(j, u.get(j, j) * u.get(j, j))?);
            }
            Ok(SymMatrix::from_upper(n, |i, j| if i == j { diag[i] } else { u.get(i, j) }))
        }
    }
}

/// The deterministic lower-bound field `K̲` with its cached Cholesky factors.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationField {
    lower: Vec<SpdMatrix>,
    chol: Vec<UpperTriangular>,
    eps: f64,
    k0: f64,
    k1_tilde: f64,
}

pub const DEFAULT_EPS: f64 = 1e-2;

impl NormalizationField {
    /// `k₀` is the smallest eigenvalue of `K̲` over all points and
    /// `k̃₁ = √n·max λ_max(K̲)`, the tightest constants of the two-sided bound.
    pub fn new(lower: Vec<SymMatrix>, eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidInput(format!("epsilon must be positive, got {eps}")));
        }
        let n = lower.first().map_or(0, SymMatrix::n);
        if n == 0 {
            return Err(Error::InvalidInput("empty normalization field".into()));
        }
        let mut k0 = f64::INFINITY;
        let mut kmax = 0.0f64;
        let mut chol = Vec::with_capacity(lower.len());
        let mut spd = Vec::with_capacity(lower.len());
        for (p, m) in lower.into_iter().enumerate() {
            if m.n() != n {
                return Err(Error::Dimension("mixed sizes in the normalization field".into()));
            }
            let u = chol_upper(&m).map_err(|_| Error::InvalidInput(format!("K̲ is not SPD at point {p}")))?;
            let d = m.eigen()?;
            k0 = k0.min(d.eigvals[0]);
            kmax = kmax.max(d.eigvals[n - 1]);
            chol.push(u);
            spd.push(SpdMatrix::from_construction(m));
        }
        if !(k0 > 0.0) {
            return Err(Error::InvalidInput("K̲ has a non-positive eigenvalue".into()));
        }
        Ok(Self { lower: spd, chol, eps, k0, k1_tilde: libm::sqrt(n as f64) * kmax })
    }

    pub fn constant(k: &SymMatrix, points: usize, eps: f64) -> Result<Self> {
        Self::new(vec![k.clone(); points], eps)
    }

    /// Averages `K̲` over each cell's vertices.
    pub fn to_centroids(&self, mesh: &Mesh) -> Result<Self> {
        let nodal = SymField::from_matrices(&self.lower.iter().map(|m| m.as_sym().clone()).collect::<Vec<_>>())?;
        let cells = nodal.to_centroids(mesh)?;
        Self::new((0..cells.points()).map(|e| cells.at(e)).collect(), self.eps)
    }

    pub fn n(&self) -> usize {
        self.lower[0].n()
    }

    pub fn points(&self) -> usize {
        self.lower.len()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn k0(&self) -> f64 {
        self.k0
    }

    pub fn k1_tilde(&self) -> f64 {
        self.k1_tilde
    }

    /// `k̲₁ = n·k̃₁ ≥ tr K̲(x)`
    pub fn k1(&self) -> f64 {
        self.n() as f64 * self.k1_tilde
    }

    /// `k_ε = k₀ε/(1+ε)`, the uniform lower bound of every normalized field.
    pub fn k_eps(&self) -> f64 {
        self.k0 * self.eps / (1.0 + self.eps)
    }

    pub fn lower(&self, p: usize) -> &SpdMatrix {
        &self.lower[p]
    }

    pub fn chol(&self, p: usize) -> &UpperTriangular {
        &self.chol[p]
    }

    /// `K = L̲ᵀ(εI + K₀)L̲/(1+ε)` at point `p`.
    pub fn normalize(&self, k0: &SymMatrix, p: usize) -> SpdMatrix {
        let n = k0.n();
        let mut shifted = k0.clone();
        for i in 0..n {
            shifted.set(i, i, shifted.get(i, i) + self.eps);
        }
        let k = self.chol[p].congruence(&shifted).scale(1.0 / (1.0 + self.eps));
        SpdMatrix::from_construction(k)
    }

    /// `K₀ = (1+ε)L̲⁻ᵀ K L̲⁻¹ − εI`; fails when the result is not SPD, which
    /// means `K` dips below the lower bound `k_ε`.
    pub fn denormalize(&self, k: &SymMatrix, p: usize) -> Result<SpdMatrix> {
        let mut k0 = self.chol[p].inverse_congruence(k).scale(1.0 + self.eps);
        for i in 0..k0.n() {
            k0.set(i, i, k0.get(i, i) - self.eps);
        }
        match chol_upper(&k0) {
            Ok(_) => Ok(SpdMatrix::from_construction(k0)),
            Err(Error::NotPositiveDefinite { .. }) => Err(Error::Indefinite { point: p }),
            Err(e) => Err(e),
        }
    }

    /// `tr K̲(p)⁻¹`
    pub fn trace_inverse(&self, p: usize) -> f64 {
        let n = self.n();
        let u = &self.chol[p];
        // tr(K̲⁻¹) = ‖U⁻ᵀ‖_F² for K̲ = UᵀU
        let mut total = 0.0;
        for c in 0..n {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            total += u.solve_transposed(&e).iter().map(|v| v * v).sum::<f64>();
        }
        total
    }
}

/// Sup norms of the truncated expansion entering `δ`:
/// `g0_sup = ‖G₀‖_∞` and `mode_sup[i] = √σ_i·‖G_i‖_∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundContext {
    pub g0_sup: f64,
    pub mode_sup: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub k_eps: f64,
    /// Realized bound with the observed `max_x ‖G(x)‖_F` in place of `δ`.
    pub beta: f64,
    pub delta: f64,
    pub gamma: f64,
    /// Bound on `E{γ}`, square representation only.
    pub gamma_bar: Option<f64>,
    pub zeta_bar: f64,
}

fn growth_bound(kind: &RepKind, norm: &NormalizationField, g_size: f64) -> f64 {
    let n = norm.n() as f64;
    let eps = norm.eps();
    let k1 = norm.k1();
    match kind {
        RepKind::Exponential => k1 * libm::sqrt(n) * (eps + libm::exp(g_size)) / (1.0 + eps),
        RepKind::Square(h) => k1 * (libm::sqrt(n) * eps + h.gamma0() + h.gamma1() * g_size * g_size) / (1.0 + eps),
    }
}

/// Bound functionals for one realization with KL coordinates `eta`.
///
/// `realized_g_sup`, when known, is `max_x ‖G(x)‖_F` of the realization and
/// feeds `β`; otherwise `β` falls back to `γ`.
pub fn bounds(kind: &RepKind, norm: &NormalizationField, ctx: &BoundContext, eta: &[f64], realized_g_sup: Option<f64>) -> BoundReport {
    let delta = ctx.g0_sup + ctx.mode_sup.iter().zip(eta).map(|(m, e)| m * e.abs()).sum::<f64>();
    let gamma = growth_bound(kind, norm, delta);
    let beta = growth_bound(kind, norm, realized_g_sup.unwrap_or(delta));
    let total: f64 = ctx.mode_sup.iter().sum();
    let zeta_bar = 2.0 * ctx.g0_sup * ctx.g0_sup + 2.0 * total * total;
    let gamma_bar = match kind {
        RepKind::Exponential => None,
        RepKind::Square(h) => {
            let n = norm.n() as f64;
            let eps = norm.eps();
            Some(norm.k1() * (libm::sqrt(n) * eps + h.gamma0() + h.gamma1() * zeta_bar) / (1.0 + eps))
        }
    };
    BoundReport { k_eps: norm.k_eps(), beta, delta, gamma, gamma_bar, zeta_bar }
}

/// Both sides of every pointwise inequality of the class at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointwiseBounds {
    pub lambda_min: f64,
    pub k_eps: f64,
    pub k_fro: f64,
    /// `k̲₁(√n ε + ‖K₀‖_F)/(1+ε)`
    pub k_fro_bound: f64,
    pub k_inv_fro: f64,
    /// `√n(1+ε)/ε · tr K̲⁻¹`
    pub k_inv_fro_bound: f64,
    pub k0_fro: f64,
    /// `√n e^{‖G‖_F}` (exponential) or `γ₀ + γ₁‖G‖²_F` (square)
    pub k0_fro_bound: f64,
}

impl PointwiseBounds {
    pub fn all_hold(&self, slack: f64) -> bool {
        self.lambda_min >= self.k_eps - slack
            && self.k_fro <= self.k_fro_bound * (1.0 + slack)
            && self.k_inv_fro <= self.k_inv_fro_bound * (1.0 + slack)
            && self.k0_fro <= self.k0_fro_bound * (1.0 + slack)
    }
}

/// Evaluates `G → K₀ → K` at point `p` and every pointwise bound on the way.
pub fn pointwise_bounds(kind: &RepKind, norm: &NormalizationField, g: &SymMatrix, p: usize) -> Result<PointwiseBounds> {
    let n = g.n() as f64;
    let eps = norm.eps();
    let k0 = rep_forward(kind, g)?;
    let k = norm.normalize(&k0, p);
    let kd = k.eigen()?;
    let k_inv_fro = libm::sqrt(kd.eigvals.iter().map(|l| 1.0 / (l * l)).sum());
    let gf = g.frobenius_norm();
    let k0_fro_bound = match kind {
        RepKind::Exponential => libm::sqrt(n) * libm::exp(gf),
        RepKind::Square(h) => h.gamma0() + h.gamma1() * gf * gf,
    };
    Ok(PointwiseBounds {
        lambda_min: kd.eigvals[0],
        k_eps: norm.k_eps(),
        k_fro: k.frobenius_norm(),
        k_fro_bound: norm.k1() * (libm::sqrt(n) * eps + k0.frobenius_norm()) / (1.0 + eps),
        k_inv_fro,
        k_inv_fro_bound: libm::sqrt(n) * (1.0 + eps) / eps * norm.trace_inverse(p),
        k0_fro: k0.frobenius_norm(),
        k0_fro_bound,
    })
}
