//! From the fitted prior to the reduced chaos representation: realizations
//! of `G`, their KL basis and the initial chaos coefficients `[y₀]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(test)]
use super::apm::apm_sample;
use super::apm::{ApmFamily, ApmKind, ApmParams, ApmSampler};
use crate::chaos::ChaosBasis;
use crate::error::{Error, Result};
use crate::field::SymField;
use crate::klpce::{kl_from_realizations, project_eta, KlBasis, RealizationSet};
use crate::linalg::{HouseholderQr, Matrix};
use crate::matalg::sym_vec;
use crate::mesh::Mesh;
use crate::repclass::{rep_inverse, NormalizationField, RepKind, SquashKind};
use crate::rng::{normal, stream};
use crate::special::normal_quantile;
use crate::stiefel::StiefelPoint;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OapmOptions {
    /// KL truncation `m`.
    pub m: usize,
    pub germ_dim: usize,
    pub degree: usize,
    /// `ν_KL`
    pub realizations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct OapmChain {
    pub kind: RepKind,
    /// `K̲` on mesh nodes.
    pub norm: NormalizationField,
    pub kl: KlBasis,
    /// Chaos without the constant, `N` terms.
    pub basis: ChaosBasis,
    pub y0: StiefelPoint,
    pub gaussian_case: bool,
    /// Projected `η` of every realization.
    pub eta: Vec<Vec<f64>>,
}

/// `G = 𝒢⁻¹(K̲-denormalized K)` at every node of every realization.
pub fn g_realizations(kind: &RepKind, norm: &NormalizationField, fields: &[SymField]) -> Result<RealizationSet> {
    let out = fields
        .iter()
        .map(|k| {
            let mut g = SymField::zeros(k.n(), k.points());
            for p in 0..k.points() {
                let k0 = norm.denormalize(&k.at(p), p)?;
                g.packed_mut(p).copy_from_slice(&sym_vec(&rep_inverse(kind, &k0)?));
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    RealizationSet::new(out)
}

/// Whether `G` of the prior is exactly Gaussian under `kind`.
pub fn is_gaussian_case(family: &ApmFamily, w: &ApmParams, kind: &RepKind) -> bool {
    match (family.kind, kind) {
        (ApmKind::SquareSfg, RepKind::Square(h)) => {
            matches!(h.kind(), SquashKind::Apm { dispersion, .. } if *dispersion == w.dispersion) && h.n() == family.n
        }
        _ => false,
    }
}

/// Least-squares chaos coefficients of `η` on rank-Gaussianized germs,
/// projected onto the Stiefel manifold by the polar factor.
///
/// Germ `k < min(N_g, m)` is the normal score of the ranks of `η_k`; any
/// further germ is an independent seeded normal.
pub fn fit_y0(eta: &[Vec<f64>], basis: &ChaosBasis, seed: u64) -> Result<StiefelPoint> {
    let count = eta.len();
    let m = eta.first().map_or(0, Vec::len);
    let ng = basis.dim();
    if count <= basis.len() {
        return Err(Error::InsufficientData(format!("{count} samples for {} chaos terms", basis.len())));
    }
    let mut xi = vec![vec![0.0; ng]; count];
    for k in 0..ng.min(m) {
        let mut order: Vec<usize> = (0..count).collect();
        order.sort_by(|&a, &b| eta[a][k].total_cmp(&eta[b][k]));
        for (rank, &l) in order.iter().enumerate() {
            xi[l][k] = normal_quantile((rank as f64 + 1.0) / (count as f64 + 1.0));
        }
    }
    if ng > m {
        for (l, x) in xi.iter_mut().enumerate() {
            let mut rng = stream(seed, "y0-germ", l as u64);
            for v in x.iter_mut().skip(m) {
                *v = normal(&mut rng);
            }
        }
    }
    let n = basis.len();
    let mut design = Matrix::zeros(count, n);
    for (l, x) in xi.iter().enumerate() {
        let psi = basis.eval(x);
        for j in 0..n {
            design[(l, j)] = psi[j];
        }
    }
    let qr = HouseholderQr::new(&design);
    let mut rhs = Matrix::from_fn(count, m, |l, i| eta[l][i]);
    qr.apply_qt(&mut rhs);
    let r = qr.r();
    let mut y = Matrix::zeros(n, m);
    for c in 0..m {
        for i in (0..n).rev() {
            let mut s = rhs[(i, c)];
            for j in i + 1..n {
                s -= r[(i, j)] * y[(j, c)];
            }
            if r[(i, i)].abs() <= 1e-12 * r[(0, 0)].abs() {
                return Err(Error::RankDeficient("chaos design matrix".into()));
            }
            y[(i, c)] = s / r[(i, i)];
        }
    }
    StiefelPoint::polar(&y)
}

/// `G` realizations of the optimal prior with the lower bound they were
/// normalized by.
pub fn oapm_realizations(
    family: &ApmFamily,
    w: &ApmParams,
    mesh: &Mesh,
    kind: &RepKind,
    count: usize,
    seed: u64,
) -> Result<(RealizationSet, NormalizationField)> {
    family.check(w)?;
    let sampler = ApmSampler::new(*family, mesh, w.corr_length, count, seed)?;
    let fields = sampler.realize_all(w.level, w.dispersion)?;
    let norm = family.lower_bound(w, mesh.n_nodes())?;
    Ok((g_realizations(kind, &norm, &fields)?, norm))
}

/// KL basis of `set` and the chaos coefficients of its projections.
/// `gaussian_case` skips the fit and returns the canonical point.
pub fn chain_from_realizations(
    set: &RealizationSet,
    norm: NormalizationField,
    kind: RepKind,
    quad: &[f64],
    opts: &OapmOptions,
    gaussian_case: bool,
) -> Result<OapmChain> {
    let kl = kl_from_realizations(set, quad, opts.m)?;
    let eta = project_eta(set, &kl)?;
    let basis = ChaosBasis::hermite(opts.germ_dim, opts.degree, false);
    let gaussian_case = gaussian_case && opts.degree >= 1 && opts.germ_dim >= opts.m;
    let y0 = if gaussian_case { StiefelPoint::canonical(basis.len(), opts.m)? } else { fit_y0(&eta, &basis, opts.seed)? };
    Ok(OapmChain { kind, norm, kl, basis, y0, gaussian_case, eta })
}

/// Realizations of the optimal prior, their KL basis and `[y₀]`.
pub fn build_oapm_chain(family: &ApmFamily, w: &ApmParams, mesh: &Mesh, kind: RepKind, opts: &OapmOptions) -> Result<OapmChain> {
    let (set, norm) = oapm_realizations(family, w, mesh, &kind, opts.realizations, opts.seed)?;
    let gaussian = is_gaussian_case(family, w, &kind);
    chain_from_realizations(&set, norm, kind, &mesh.node_weights(), opts, gaussian)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identify::apm::Matern;
    use crate::stiefel::StiefelPoint;

    fn family(kind: ApmKind) -> ApmFamily {
        ApmFamily { kind, n: 1, smoothness: Matern::ThreeHalves, eps: 1e-2 }
    }

    #[test]
    fn gaussian_case_gives_the_canonical_point() {
        let mesh = Mesh::interval(16, 0.0, 1.0).unwrap();
        let fam = family(ApmKind::SquareSfg);
        let w = ApmParams { level: 2.0, dispersion: 0.5, corr_length: 0.3 };
        let kind = fam.matching_square(&w).unwrap();
        let opts = OapmOptions { m: 2, germ_dim: 2, degree: 1, realizations: 300, seed: 4 };
        let chain = build_oapm_chain(&fam, &w, &mesh, kind, &opts).unwrap();
        assert!(chain.gaussian_case);
        let y = chain.y0.matrix();
        for j in 0..2 {
            for i in 0..2 {
                assert_eq!(y[(j, i)], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn apm_inverse_is_gaussian() {
        let mesh = Mesh::interval(8, 0.0, 1.0).unwrap();
        let fam = family(ApmKind::SquareSfg);
        let w = ApmParams { level: 1.0, dispersion: 0.6, corr_length: 0.4 };
        let fields = apm_sample(&fam, &w, &mesh, 2000, 9);
        let set = g_realizations(&fam.matching_square(&w).unwrap(), &fam.lower_bound(&w, 9).unwrap(), &fields.unwrap()).unwrap();
        // G = s·N(0, 1) with s = δ/√2 at every node.
        let s = 0.6 / 2f64.sqrt();
        let vals: Vec<f64> = set.fields().iter().map(|g| g.packed(4)[0] / s).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        assert!(mean.abs() < 0.1 && (var - 1.0).abs() < 0.12, "{mean} {var}");
    }

    #[test]
    fn least_squares_recovers_a_monotone_chaos() {
        let basis = ChaosBasis::hermite(1, 3, false);
        let truth = Matrix::from_row_major(3, 1, vec![0.9, 0.3, 0.3]).unwrap();
        let truth = StiefelPoint::polar(&truth).unwrap();
        let mut rng = stream(1, "t", 0);
        let eta: Vec<Vec<f64>> = (0..20000).map(|_| crate::klpce::eta_from_xi(&truth, &basis, &[normal(&mut rng)])).collect();
        let y = fit_y0(&eta, &basis, 0).unwrap();
        assert!(y.residual() < 1e-10);
        assert!(y.matrix().max_abs_diff(truth.matrix()) < 0.03, "{:?}", y.matrix());
    }

    #[test]
    fn fitted_chaos_reproduces_eta_moments() {
        let mesh = Mesh::interval(16, 0.0, 1.0).unwrap();
        let fam = family(ApmKind::IsoLognormal);
        let w = ApmParams { level: 1.0, dispersion: 0.8, corr_length: 0.3 };
        let opts = OapmOptions { m: 1, germ_dim: 1, degree: 3, realizations: 3000, seed: 2 };
        let chain = build_oapm_chain(&fam, &w, &mesh, RepKind::Exponential, &opts).unwrap();
        assert!(!chain.gaussian_case);
        assert!(chain.y0.residual() < 1e-10);
        let eta: Vec<f64> = chain.eta.iter().map(|e| e[0]).collect();
        let mut rng = stream(3, "t", 0);
        let model: Vec<f64> = (0..20000).map(|_| crate::klpce::eta_from_xi(&chain.y0, &chain.basis, &[normal(&mut rng)])[0]).collect();
        for k in 1..=4 {
            let moment = |v: &[f64]| v.iter().map(|x| x.powi(k)).sum::<f64>() / v.len() as f64;
            let spread = (eta.iter().map(|x| x.powi(2 * k)).sum::<f64>() / eta.len() as f64).sqrt();
            let tol = 5.0 * spread / (eta.len() as f64).sqrt();
            assert!((moment(&eta) - moment(&model)).abs() < tol, "order {k}: {} vs {}", moment(&eta), moment(&model));
        }
    }

    #[test]
    fn too_few_samples_for_the_chaos() {
        let basis = ChaosBasis::hermite(2, 2, false);
        let eta = vec![vec![0.0]; 5];
        assert!(matches!(fit_y0(&eta, &basis, 0), Err(Error::InsufficientData(_))));
    }
}
