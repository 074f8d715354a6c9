//! Orthonormal polynomial chaos: Gauss rules for the standard Gaussian and
//! uniform measures, graded total-degree multi-index sets and the
//! corresponding normalized tensor-product polynomials.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::tridiagonal_eigen;

/// A one-dimensional quadrature rule whose weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussRule {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Golub–Welsch: nodes are the eigenvalues of the Jacobi matrix, weights the
/// squared first components of its normalized eigenvectors.
fn golub_welsch(off: &[f64], k: usize) -> Result<GaussRule> {
    let (points, vecs) = tridiagonal_eigen(&vec![0.0; k], off)?;
    let mut weights: Vec<f64> = (0..k).map(|j| vecs[(0, j)] * vecs[(0, j)]).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    // the rules are symmetric; enforce it so odd moments vanish to rounding
    let mut points = points;
    for i in 0..k / 2 {
        let p = 0.5 * (points[k - 1 - i] - points[i]);
        points[i] = -p;
        points[k - 1 - i] = p;
        let w = 0.5 * (weights[i] + weights[k - 1 - i]);
        weights[i] = w;
        weights[k - 1 - i] = w;
    }
    if k % 2 == 1 {
        points[k / 2] = 0.0;
    }
    Ok(GaussRule { points, weights })
}

/// `k`-point Gauss rule for the standard normal law, exact for polynomials of
/// degree `2k − 1`.
pub fn gauss_hermite(k: usize) -> Result<GaussRule> {
    if k == 0 {
        return Err(Error::InvalidInput("quadrature needs at least one point".into()));
    }
    let off: Vec<f64> = (1..k).map(|i| libm::sqrt(i as f64)).collect();
    golub_welsch(&off, k)
}

/// `k`-point Gauss rule for the uniform law on `[−1, 1]`.
pub fn gauss_legendre(k: usize) -> Result<GaussRule> {
    if k == 0 {
        return Err(Error::InvalidInput("quadrature needs at least one point".into()));
    }
    let off: Vec<f64> = (1..k)
        .map(|i| {
            let i = i as f64;
            i / libm::sqrt(4.0 * i * i - 1.0)
        })
        .collect();
    golub_welsch(&off, k)
}

/// Tensor product of one-dimensional rules: points row-major, one row per node.
pub fn tensor_rule(rules: &[GaussRule]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut points = vec![Vec::new()];
    let mut weights = vec![1.0];
    for rule in rules {
        let mut np = Vec::with_capacity(points.len() * rule.points.len());
        let mut nw = Vec::with_capacity(np.capacity());
        for (p, w) in points.iter().zip(&weights) {
            for (x, v) in rule.points.iter().zip(&rule.weights) {
                let mut q = p.clone();
                q.push(*x);
                np.push(q);
                nw.push(w * v);
            }
        }
        points = np;
        weights = nw;
    }
    (points, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolyFamily {
    /// Orthonormal Hermite polynomials for the standard normal law.
    Hermite,
    /// Orthonormal Legendre polynomials for the uniform law on `[−1, 1]`.
    Legendre,
}

impl PolyFamily {
    pub fn rule(self, k: usize) -> Result<GaussRule> {
        match self {
            PolyFamily::Hermite => gauss_hermite(k),
            PolyFamily::Legendre => gauss_legendre(k),
        }
    }

    /// Values of the orthonormal polynomials of degree `0..=p` at `x`.
    pub fn values_into(self, x: f64, out: &mut [f64]) {
        let p = out.len();
        if p == 0 {
            return;
        }
        out[0] = 1.0;
        if p == 1 {
            return;
        }
        match self {
            PolyFamily::Hermite => {
                out[1] = x;
                for k in 1..p - 1 {
                    let kf = k as f64;
                    out[k + 1] = (x * out[k] - libm::sqrt(kf) * out[k - 1]) / libm::sqrt(kf + 1.0);
                }
            }
            PolyFamily::Legendre => {
                // plain Legendre recurrence, normalized afterwards by √(2k+1)
                let mut prev = 1.0;
                let mut cur = x;
                out[1] = x * libm::sqrt(3.0);
                for k in 1..p - 1 {
                    let kf = k as f64;
                    let next = ((2.0 * kf + 1.0) * x * cur - kf * prev) / (kf + 1.0);
                    prev = cur;
                    cur = next;
                    out[k + 1] = cur * libm::sqrt(2.0 * kf + 3.0);
                }
            }
        }
    }

    pub fn values(self, x: f64, p: usize) -> Vec<f64> {
        let mut out = vec![0.0; p + 1];
        self.values_into(x, &mut out);
        out
    }
}

/// All multi-indices of total degree `1..=p` (or `0..=p`) in `dim` variables.
///
/// Ordered by degree, and within a degree so that larger leading exponents
/// come first; the degree-one indices are therefore `e₁, e₂, …` in order.
pub fn total_degree_indices(dim: usize, p: usize, include_constant: bool) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    if include_constant {
        out.push(vec![0; dim]);
    }
    if dim == 0 {
        return out;
    }
    for d in 1..=p {
        let mut cur = vec![0u32; dim];
        push_degree(&mut out, &mut cur, 0, d as u32);
    }
    out
}

fn push_degree(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, k: usize, left: u32) {
    if k == cur.len() - 1 {
        cur[k] = left;
        out.push(cur.clone());
        cur[k] = 0;
        return;
    }
    for e in (0..=left).rev() {
        cur[k] = e;
        push_degree(out, cur, k + 1, left - e);
    }
    cur[k] = 0;
}

/// Number of multi-indices of total degree at most `p` in `dim` variables,
/// constant included.
pub fn total_degree_count(dim: usize, p: usize) -> usize {
    // C(dim + p, p)
    let mut c: u128 = 1;
    for i in 1..=p as u128 {
        c = c * (dim as u128 + i) / i;
    }
    c as usize
}

/// Normalized multivariate chaos `Ψ_j(ξ) = Π_k ψ_{α_jk}(ξ_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChaosBasis {
    dim: usize,
    degree: usize,
    family: PolyFamily,
    indices: Vec<Vec<u32>>,
}

impl ChaosBasis {
    /// Hermite chaos in `dim` Gaussian germs up to total degree `degree`.
    pub fn hermite(dim: usize, degree: usize, include_constant: bool) -> Self {
        Self::new(PolyFamily::Hermite, dim, degree, include_constant)
    }

    pub fn new(family: PolyFamily, dim: usize, degree: usize, include_constant: bool) -> Self {
        Self { dim, degree, family, indices: total_degree_indices(dim, degree, include_constant) }
    }

    /// A basis from an explicit index list (all of length `dim`).
    pub fn from_indices(family: PolyFamily, dim: usize, indices: Vec<Vec<u32>>) -> Result<Self> {
        if indices.iter().any(|a| a.len() != dim) {
            return Err(Error::Dimension(format!("multi-index length differs from {dim}")));
        }
        let degree = indices.iter().map(|a| a.iter().sum::<u32>() as usize).max().unwrap_or(0);
        Ok(Self { dim, degree, family, indices })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn family(&self) -> PolyFamily {
        self.family
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[Vec<u32>] {
        &self.indices
    }

    pub fn eval_into(&self, xi: &[f64], out: &mut [f64]) {
        assert_eq!(xi.len(), self.dim);
        assert_eq!(out.len(), self.indices.len());
        let p1 = self.degree + 1;
        let mut table = vec![0.0; self.dim * p1];
        for (k, &x) in xi.iter().enumerate() {
            self.family.values_into(x, &mut table[k * p1..(k + 1) * p1]);
        }
        for (o, alpha) in out.iter_mut().zip(&self.indices) {
            *o = alpha.iter().enumerate().map(|(k, &e)| table[k * p1 + e as usize]).product();
        }
    }

    pub fn eval(&self, xi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.indices.len()];
        self.eval_into(xi, &mut out);
        out
    }

    /// Tensor Gauss rule that integrates products of two basis functions exactly.
    pub fn exact_rule(&self) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let rule = self.family.rule(self.degree + 1)?;
        Ok(tensor_rule(&vec![rule; self.dim]))
    }
}
