//! Algebraic prior models: homogeneous Gaussian fields with Matérn
//! correlation pushed through a lognormal or square-type construction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::field::SymField;
use crate::linalg::{cholesky_lower, Matrix};
use crate::matalg::{sym_dim, sym_index, SymMatrix};
use crate::mesh::Mesh;
use crate::repclass::{rep_forward, NormalizationField, RepKind, SquashFunction};
use crate::rng::{normal, stream};

/// Matérn smoothness with closed-form correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Matern {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl Matern {
    pub fn from_nu(nu: f64) -> Result<Self> {
        match nu {
            0.5 => Ok(Matern::Half),
            1.5 => Ok(Matern::ThreeHalves),
            2.5 => Ok(Matern::FiveHalves),
            _ => Err(Error::Domain(format!("Matérn smoothness {nu} (supported: 0.5, 1.5, 2.5)"))),
        }
    }

    pub fn nu(self) -> f64 {
        match self {
            Matern::Half => 0.5,
            Matern::ThreeHalves => 1.5,
            Matern::FiveHalves => 2.5,
        }
    }

    pub fn correlation(self, r: f64, ell: f64) -> f64 {
        let t = r / ell;
        match self {
            Matern::Half => libm::exp(-t),
            Matern::ThreeHalves => {
                let a = libm::sqrt(3.0) * t;
                (1.0 + a) * libm::exp(-a)
            }
            Matern::FiveHalves => {
                let a = libm::sqrt(5.0) * t;
                (1.0 + a + a * a / 3.0) * libm::exp(-a)
            }
        }
    }
}

/// Unit-variance stationary Gaussian field on mesh nodes via the Cholesky
/// factor of its correlation matrix.
#[derive(Debug, Clone)]
pub struct GaussianFieldSampler {
    chol: Matrix,
}

impl GaussianFieldSampler {
    pub fn new(mesh: &Mesh, smoothness: Matern, corr_length: f64) -> Result<Self> {
        if !(corr_length > 0.0) || !corr_length.is_finite() {
            return Err(Error::Domain(format!("correlation length {corr_length}")));
        }
        let p = mesh.n_nodes();
        let mut nugget = 1e-10;
        loop {
            let c = Matrix::from_fn(p, p, |i, j| {
                let r = libm::sqrt(mesh.node(i).iter().zip(mesh.node(j)).map(|(a, b)| (a - b) * (a - b)).sum());
                smoothness.correlation(r, corr_length) + if i == j { nugget } else { 0.0 }
            });
            match cholesky_lower(&c, 0.0) {
                Ok(chol) => return Ok(Self { chol }),
                Err(Error::NotPositiveDefinite { .. }) if nugget < 1e-4 => nugget *= 10.0,
                Err(e) => return Err(e),
            }
        }
    }

    pub fn points(&self) -> usize {
        self.chol.rows()
    }

    /// `L ζ` for standard normal `ζ`.
    pub fn correlate(&self, zeta: &[f64]) -> Vec<f64> {
        self.chol.matvec(zeta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApmKind {
    /// `K = k̄ exp(δ g − δ²/2) I`
    IsoLognormal,
    /// `K = k̄ (εI + LᵀL)/(1+ε)` with independent entries of `G` and the
    /// Gamma-quantile squash on the diagonal.
    SquareSfg,
}

/// Hyperparameters `w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApmParams {
    pub level: f64,
    pub dispersion: f64,
    pub corr_length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApmFamily {
    pub kind: ApmKind,
    pub n: usize,
    pub smoothness: Matern,
    pub eps: f64,
}

impl ApmFamily {
    pub fn max_dispersion(&self) -> f64 {
        match self.kind {
            ApmKind::IsoLognormal => f64::INFINITY,
            ApmKind::SquareSfg if self.n > 1 => libm::sqrt((self.n as f64 + 1.0) / (self.n as f64 - 1.0)),
            ApmKind::SquareSfg => f64::INFINITY,
        }
    }

    pub fn check(&self, w: &ApmParams) -> Result<()> {
        if !(w.level > 0.0 && w.level.is_finite()) {
            return Err(Error::Domain(format!("level {}", w.level)));
        }
        if !(w.corr_length > 0.0 && w.corr_length.is_finite()) {
            return Err(Error::Domain(format!("correlation length {}", w.corr_length)));
        }
        if !(w.dispersion >= 0.0 && w.dispersion < self.max_dispersion()) {
            return Err(Error::Domain(format!("dispersion {} (admissible [0, {}))", w.dispersion, self.max_dispersion())));
        }
        Ok(())
    }

    /// Number of independent scalar Gaussian fields per realization.
    pub fn channels(&self) -> usize {
        match self.kind {
            ApmKind::IsoLognormal => 1,
            ApmKind::SquareSfg => sym_dim(self.n),
        }
    }

    /// `K̲ = k̄ I`, the lower-bound field used with this family.
    pub fn lower_bound(&self, w: &ApmParams, points: usize) -> Result<NormalizationField> {
        NormalizationField::constant(&SymMatrix::identity(self.n).scale(w.level), points, self.eps)
    }

    /// The square representation whose inverse turns realizations of this
    /// family back into its Gaussian fields.
    pub fn matching_square(&self, w: &ApmParams) -> Result<RepKind> {
        Ok(RepKind::Square(SquashFunction::apm(self.n, w.dispersion)?))
    }
}

/// Common-random-number sampler: the correlated Gaussian fields are drawn
/// once, so realizations vary smoothly with `(level, dispersion)`.
#[derive(Debug, Clone)]
pub struct ApmSampler {
    family: ApmFamily,
    corr_length: f64,
    points: usize,
    /// `count × channels × points`
    base: Vec<Vec<Vec<f64>>>,
}

impl ApmSampler {
    pub fn new(family: ApmFamily, mesh: &Mesh, corr_length: f64, count: usize, seed: u64) -> Result<Self> {
        let sampler = GaussianFieldSampler::new(mesh, family.smoothness, corr_length)?;
        let p = mesh.n_nodes();
        let base = (0..count)
            .map(|l| {
                let mut rng = stream(seed, "apm", l as u64);
                (0..family.channels())
                    .map(|_| {
                        let zeta: Vec<f64> = (0..p).map(|_| normal(&mut rng)).collect();
                        sampler.correlate(&zeta)
                    })
                    .collect()
            })
            .collect();
        Ok(Self { family, corr_length, points: p, base })
    }

    pub fn family(&self) -> &ApmFamily {
        &self.family
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    /// The unit-variance Gaussian fields of realization `l`.
    pub fn gaussian(&self, l: usize) -> &[Vec<f64>] {
        &self.base[l]
    }

    /// All realizations at hyperparameters `(level, dispersion)`; the
    /// correlation length is the one the sampler was built with.
    pub fn realize_all(&self, level: f64, dispersion: f64) -> Result<Vec<SymField>> {
        let w = ApmParams { level, dispersion, corr_length: self.corr_length };
        self.family.check(&w)?;
        let n = self.family.n;
        let nw = sym_dim(n);
        match self.family.kind {
            ApmKind::IsoLognormal => Ok(self
                .base
                .iter()
                .map(|fields| {
                    let mut out = SymField::zeros(n, self.points);
                    for p in 0..self.points {
                        let v = level * libm::exp(dispersion * fields[0][p] - 0.5 * dispersion * dispersion);
                        let dst = out.packed_mut(p);
                        for i in 0..n {
                            dst[sym_index(i, i)] = v;
                        }
                    }
                    out
                })
                .collect()),
            ApmKind::SquareSfg => {
                if dispersion == 0.0 {
                    let k = SymMatrix::identity(n).scale(level);
                    return Ok(vec![SymField::constant(self.points, &k); self.base.len()]);
                }
                let kind = self.family.matching_square(&w)?;
                let s = dispersion / libm::sqrt(n as f64 + 1.0);
                let norm = self.family.lower_bound(&w, 1)?;
                self.base
                    .iter()
                    .map(|fields| {
                        let mut out = SymField::zeros(n, self.points);
                        for p in 0..self.points {
                            let g = SymMatrix::from_upper(n, |i, j| s * fields[sym_index(i, j)][p]);
                            let k = norm.normalize(rep_forward(&kind, &g)?.as_sym(), 0);
                            out.packed_mut(p).copy_from_slice(&crate::matalg::sym_vec(&k));
                        }
                        debug_assert_eq!(out.n_w(), nw);
                        Ok(out)
                    })
                    .collect()
            }
        }
    }
}

/// `count` seeded realizations of `[K^APM(·; w)]` on the mesh nodes.
pub fn apm_sample(family: &ApmFamily, w: &ApmParams, mesh: &Mesh, count: usize, seed: u64) -> Result<Vec<SymField>> {
    family.check(w)?;
    ApmSampler::new(*family, mesh, w.corr_length, count, seed)?.realize_all(w.level, w.dispersion)
}
