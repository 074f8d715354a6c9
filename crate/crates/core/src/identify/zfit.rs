//! Identification of the Stiefel coordinates `z` through the surrogate
//! solution map: map construction, maximum likelihood, random-walk
//! posterior sampling, KL restart and the surrogate audit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use super::apm::{apm_sample, ApmFamily, ApmParams};
use super::likelihood::{gaussian_log_likelihood, log_likelihood, LikelihoodKind};
use super::oapm::{chain_from_realizations, OapmChain, OapmOptions};
use super::observe::{DirectForward, Observation};
use crate::error::{Error, Result};
use crate::fem::{FemSpace, Load};
use crate::field::SymField;
use crate::klpce::{eta_from_xi, kl_from_realizations, KlBasis, RealizationSet};
use crate::linalg::CgReport;
use crate::linalg::Matrix;
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::rng::{normal, normal_vec, stream};
use crate::sgalerkin::{
    CoefficientModel, GalerkinProblem, ParamMeasure, ParamQuadrature, ParametricCoefficient, SolutionMap, StochasticSpace, CG_TOL,
};
use crate::special::normal_quantile;
use crate::stiefel::{StiefelChart, StiefelPoint};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapSpec {
    pub germ_degree: usize,
    pub param_degree: usize,
    pub measure: ParamMeasure,
    /// Chart step `t`.
    pub t: f64,
    /// Gauss points per direction; `0` picks `max(p_germ, p_param) + 2`.
    pub quad_points: usize,
    /// Points of the Monte Carlo rule used in high dimension.
    pub mc_count: usize,
    pub tau: Option<f64>,
    pub seed: u64,
    pub cg_max_iter: usize,
}

impl Default for MapSpec {
    fn default() -> Self {
        Self {
            germ_degree: 3,
            param_degree: 3,
            measure: ParamMeasure::Gaussian { scale: 0.25 },
            t: 1.0,
            quad_points: 0,
            mc_count: 2000,
            tau: None,
            seed: 0,
            cg_max_iter: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuiltMap {
    pub map: SolutionMap,
    pub problem: GalerkinProblem,
    pub coefficient: ParametricCoefficient,
    pub cg: CgReport,
}

/// Coefficient model of the chain with the chart at `[y₀]`.
pub fn chain_coefficient(chain: &OapmChain, mesh: &crate::mesh::Mesh, t: f64) -> Result<ParametricCoefficient> {
    let chart = StiefelChart::new(chain.y0.clone(), t)?;
    ParametricCoefficient::new(chain.kind.clone(), &chain.norm, &chain.kl, chain.basis.clone(), chart, mesh)
}

/// The Galerkin problem of the chain's coefficient, before solving.
pub fn assemble_map_problem(
    chain: &OapmChain,
    fem: &FemSpace,
    load: &Load,
    spec: &MapSpec,
) -> Result<(GalerkinProblem, ParametricCoefficient)> {
    let coefficient = chain_coefficient(chain, fem.mesh(), spec.t)?;
    let (g, v) = (coefficient.germ_dim(), coefficient.param_dim());
    let space = StochasticSpace::new(g, spec.germ_degree, v, spec.param_degree, spec.measure);
    let points = if spec.quad_points == 0 { spec.germ_degree.max(spec.param_degree) + 2 } else { spec.quad_points };
    let quad = ParamQuadrature::auto(g, v, spec.measure, points, spec.mc_count, spec.seed)?;
    let problem = GalerkinProblem::assemble(fem.clone(), &coefficient, load, space, quad, spec.tau)?;
    Ok((problem, coefficient))
}

/// Galerkin surrogate `(ξ, z) ↦ u` of the chain's coefficient.
pub fn build_map(chain: &OapmChain, fem: &FemSpace, load: &Load, spec: &MapSpec) -> Result<BuiltMap> {
    let (problem, coefficient) = assemble_map_problem(chain, fem, load, spec)?;
    let (map, cg) = problem.solve(CG_TOL, spec.cg_max_iter)?;
    Ok(BuiltMap { map, problem, coefficient, cg })
}

/// Germ samples for likelihood estimates: a midpoint quantile grid in one
/// dimension, seeded normals otherwise.
pub fn germ_samples(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    if dim == 1 {
        return (0..count).map(|k| vec![normal_quantile((k as f64 + 0.5) / count as f64)]).collect();
    }
    let mut rng = stream(seed, "germ-samples", 0);
    (0..count).map(|_| normal_vec(&mut rng, dim)).collect()
}

/// `z ↦ log L(data | z)` evaluated with the solution map only.
#[derive(Debug)]
pub struct MapLikelihood<'a> {
    map: &'a SolutionMap,
    obs: &'a Observation,
    data: &'a [Vec<f64>],
    kind: LikelihoodKind,
    germ_psi: Vec<Vec<f64>>,
    trust_radius: Option<f64>,
    evals: AtomicUsize,
}

impl<'a> MapLikelihood<'a> {
    pub fn new(
        map: &'a SolutionMap,
        obs: &'a Observation,
        data: &'a [Vec<f64>],
        kind: LikelihoodKind,
        germ_count: usize,
        seed: u64,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InsufficientData("no experimental observations".into()));
        }
        if let Some(bad) = data.iter().find(|d| d.len() != obs.m_obs()) {
            return Err(Error::Dimension(format!("observation of length {}, expected {}", bad.len(), obs.m_obs())));
        }
        let space = map.space();
        let germ_psi = germ_samples(space.germ().dim(), germ_count, seed).iter().map(|x| space.eval_germ(x)).collect();
        Ok(Self { map, obs, data, kind, germ_psi, trust_radius: None, evals: AtomicUsize::new(0) })
    }

    /// Treats `z` with any `|z_i|` beyond `radius` measure widths as
    /// impossible, keeping optimizers and chains where the polynomial
    /// surrogate was fitted.
    pub fn with_trust_radius(mut self, radius: Option<f64>) -> Self {
        self.trust_radius = radius.filter(|r| *r > 0.0);
        self
    }

    pub fn trusts(&self, z: &[f64]) -> bool {
        let measure = self.measure();
        measure.contains(z) && self.trust_radius.is_none_or(|r| measure.to_t(z).iter().all(|t| t.abs() <= r))
    }

    pub fn param_dim(&self) -> usize {
        self.map.space().param().dim()
    }

    pub fn measure(&self) -> ParamMeasure {
        self.map.space().measure()
    }

    pub fn evaluations(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }

    /// Observations of `u(·, ξ_ℓ, z)` at the germ samples.
    pub fn model_samples(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let coeffs: Vec<Vec<f64>> = self.map.germ_coefficients(z).iter().map(|c| self.obs.apply(c)).collect();
        let m = self.obs.m_obs();
        self.germ_psi
            .iter()
            .map(|psi| {
                let mut out = vec![0.0; m];
                for (p, c) in psi.iter().zip(&coeffs) {
                    out.iter_mut().zip(c).for_each(|(o, v)| *o += p * v);
                }
                out
            })
            .collect()
    }

    pub fn log_likelihood(&self, z: &[f64]) -> Result<f64> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        if z.len() != self.param_dim() {
            return Err(Error::Dimension(format!("z of length {}, expected {}", z.len(), self.param_dim())));
        }
        if !self.trusts(z) {
            return Ok(f64::NEG_INFINITY);
        }
        let noise = self.obs.noise_std();
        match self.kind {
            LikelihoodKind::Gaussian => {
                // Orthonormal chaos: exact mean and covariance from the coefficients.
                let coeffs: Vec<Vec<f64>> = self.map.germ_coefficients(z).iter().map(|c| self.obs.apply(c)).collect();
                let m = self.obs.m_obs();
                let mut cov = Matrix::zeros(m, m);
                for c in &coeffs[1..] {
                    for i in 0..m {
                        for j in 0..m {
                            cov[(i, j)] += c[i] * c[j];
                        }
                    }
                }
                gaussian_log_likelihood(self.data, &coeffs[0], &cov, noise)
            }
            kind => log_likelihood(kind, self.data, &self.model_samples(z), noise),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlResult {
    pub z: Vec<f64>,
    pub log_likelihood: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Nelder–Mead maximization of the map likelihood from `z = 0`.
pub fn ml_z(lik: &MapLikelihood<'_>, opts: &NelderMeadOptions) -> Result<MlResult> {
    let v = lik.param_dim();
    if v == 0 {
        return Err(Error::InvalidInput("no parameter to identify".into()));
    }
    let mut first_error = None;
    let result = nelder_mead(
        |z| match lik.log_likelihood(z) {
            Ok(l) => -l,
            Err(e) => {
                first_error.get_or_insert(e);
                f64::INFINITY
            }
        },
        &vec![0.0; v],
        &vec![0.5; v],
        opts,
    );
    if !result.f.is_finite() {
        return Err(first_error.unwrap_or_else(|| Error::DegenerateLikelihood("likelihood is −∞ everywhere visited".into())));
    }
    Ok(MlResult { z: result.x, log_likelihood: -result.f, evals: result.evals, converged: result.converged })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesOptions {
    pub chains: usize,
    pub burn_in: usize,
    pub samples: usize,
    /// `s` of the prior `Z ~ N(0, s²I)`.
    pub prior_scale: f64,
    pub initial_step: f64,
    pub target_acceptance: f64,
    pub seed: u64,
}

impl Default for BayesOptions {
    fn default() -> Self {
        Self { chains: 3, burn_in: 500, samples: 2000, prior_scale: 0.5, initial_step: 0.3, target_acceptance: 0.3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub samples: Vec<Vec<f64>>,
    pub log_posterior: Vec<f64>,
    /// Acceptance rate after burn-in.
    pub acceptance: f64,
    pub step: f64,
}

/// One random-walk Metropolis chain; the step adapts during burn-in only.
pub fn run_chain(lik: &MapLikelihood<'_>, opts: &BayesOptions, index: usize) -> Result<Chain> {
    let v = lik.param_dim();
    let mut rng = stream(opts.seed, "mcmc", index as u64);
    if !(opts.prior_scale > 0.0) {
        return Err(Error::InvalidInput(format!("prior scale {}", opts.prior_scale)));
    }
    let inv_var = 1.0 / (opts.prior_scale * opts.prior_scale);
    let log_post = |z: &[f64]| -> Result<f64> {
        let ll = lik.log_likelihood(z)?;
        Ok(ll - 0.5 * inv_var * z.iter().map(|v| v * v).sum::<f64>())
    };
    let mut z: Vec<f64> = (0..v).map(|_| 0.1 * normal(&mut rng)).collect();
    let mut lp = log_post(&z)?;
    if !lp.is_finite() {
        z = vec![0.0; v];
        lp = log_post(&z)?;
    }
    if !lp.is_finite() {
        return Err(Error::DegenerateLikelihood("posterior vanishes at the chain start".into()));
    }
    let mut log_step = libm::log(opts.initial_step);
    let mut out =
        Chain { samples: Vec::with_capacity(opts.samples), log_posterior: Vec::with_capacity(opts.samples), acceptance: 0.0, step: 0.0 };
    let mut accepted = 0usize;
    for it in 0..opts.burn_in + opts.samples {
        let step = libm::exp(log_step);
        let proposal: Vec<f64> = z.iter().map(|v| v + step * normal(&mut rng)).collect();
        let lq = log_post(&proposal)?;
        let u: f64 = rng.random();
        let accept = lq.is_finite() && libm::log(u) < lq - lp;
        if accept {
            z = proposal;
            lp = lq;
        }
        if it < opts.burn_in {
            let a = if accept { 1.0 } else { 0.0 };
            log_step += (a - opts.target_acceptance) / libm::sqrt(it as f64 + 1.0);
        } else {
            accepted += usize::from(accept);
            out.samples.push(z.clone());
            out.log_posterior.push(lp);
        }
    }
    out.acceptance = if opts.samples == 0 { 0.0 } else { accepted as f64 / opts.samples as f64 };
    out.step = libm::exp(log_step);
    if opts.samples > 0 && !(0.01..=0.99).contains(&out.acceptance) {
        return Err(Error::StepSize(format!("chain {index} accepted {:.3} of proposals with step {:.3e}", out.acceptance, out.step)));
    }
    Ok(out)
}

/// Potential scale reduction factor per coordinate.
pub fn r_hat(chains: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let k = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let v = chains.first().and_then(|c| c.first()).map_or(0, Vec::len);
    if k < 2 || n < 2 {
        return vec![f64::NAN; v];
    }
    (0..v)
        .map(|d| {
            let means: Vec<f64> = chains.iter().map(|c| c[..n].iter().map(|z| z[d]).sum::<f64>() / n as f64).collect();
            let grand = means.iter().sum::<f64>() / k as f64;
            let b = n as f64 / (k as f64 - 1.0) * means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>();
            let w = chains
                .iter()
                .zip(&means)
                .map(|(c, m)| c[..n].iter().map(|z| (z[d] - m) * (z[d] - m)).sum::<f64>() / (n as f64 - 1.0))
                .sum::<f64>()
                / k as f64;
            let var = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
            if w > 0.0 {
                libm::sqrt(var / w)
            } else {
                f64::NAN
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub chains: Vec<Chain>,
    pub r_hat: Vec<f64>,
    pub mean: Vec<f64>,
}

impl Posterior {
    pub fn from_chains(chains: Vec<Chain>) -> Self {
        let pooled: Vec<&Vec<f64>> = chains.iter().flat_map(|c| &c.samples).collect();
        let v = pooled.first().map_or(0, |z| z.len());
        let mut mean = vec![0.0; v];
        for z in &pooled {
            mean.iter_mut().zip(z.iter()).for_each(|(m, x)| *m += x / pooled.len() as f64);
        }
        let samples: Vec<Vec<Vec<f64>>> = chains.iter().map(|c| c.samples.clone()).collect();
        Self { r_hat: r_hat(&samples), mean, chains }
    }

    pub fn pooled(&self) -> Vec<Vec<f64>> {
        self.chains.iter().flat_map(|c| c.samples.iter().cloned()).collect()
    }
}

/// Sequential chains; the std crate runs [`run_chain`] in parallel instead.
pub fn bayes_z(lik: &MapLikelihood<'_>, opts: &BayesOptions) -> Result<Posterior> {
    let chains = (0..opts.chains).map(|i| run_chain(lik, opts, i)).collect::<Result<Vec<_>>>()?;
    Ok(Posterior::from_chains(chains))
}

/// `G` realizations under the identified chaos: `Y` cycles through
/// `chart.map(z)` of the given parameter samples, the germ is fresh.
pub fn posterior_realizations(
    chain: &OapmChain,
    chart: &StiefelChart,
    z_samples: &[Vec<f64>],
    count: usize,
    seed: u64,
) -> Result<RealizationSet> {
    if z_samples.is_empty() || count == 0 {
        return Err(Error::InsufficientData("restart needs parameter samples".into()));
    }
    let ys = z_samples.iter().map(|z| chart.map(z)).collect::<Result<Vec<StiefelPoint>>>()?;
    let dim = chain.basis.dim();
    let fields: Vec<SymField> = (0..count)
        .map(|l| {
            let mut rng = stream(seed, "restart", l as u64);
            let xi = normal_vec(&mut rng, dim);
            chain.kl.sample_g(&eta_from_xi(&ys[l % ys.len()], &chain.basis, &xi))
        })
        .collect();
    RealizationSet::new(fields)
}

/// KL basis of [`posterior_realizations`].
pub fn restart_kl(chain: &OapmChain, chart: &StiefelChart, z_samples: &[Vec<f64>], count: usize, seed: u64) -> Result<KlBasis> {
    let set = posterior_realizations(chain, chart, z_samples, count, seed)?;
    kl_from_realizations(&set, chain.kl.quad(), chain.kl.m())
}

/// [`posterior_realizations`] fed back through the KL step and the chaos fit.
pub fn restart_chain(chain: &OapmChain, chart: &StiefelChart, z_samples: &[Vec<f64>], count: usize, seed: u64) -> Result<OapmChain> {
    let set = posterior_realizations(chain, chart, z_samples, count, seed)?;
    let opts = OapmOptions { m: chain.kl.m(), germ_dim: chain.basis.dim(), degree: chain.basis.degree(), realizations: count, seed };
    chain_from_realizations(&set, chain.norm.clone(), chain.kind.clone(), chain.kl.quad(), &opts, false)
}

/// Relative sup-norm mismatch between surrogate and direct observations.
fn relative_observation_error(built: &BuiltMap, direct: &DirectForward, xi: &[f64], z: &[f64]) -> Result<f64> {
    let exact = direct.observe_cells(&built.coefficient.eval(xi, z)?)?;
    let approx = direct.observation().apply(&built.map.evaluate_dofs(xi, z));
    let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = exact.iter().zip(&approx).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(diff / scale.max(f64::MIN_POSITIVE))
}

fn draw_z(measure: ParamMeasure, v: usize, rng: &mut crate::rng::StreamRng) -> Vec<f64> {
    let t: Vec<f64> = match measure {
        ParamMeasure::Gaussian { .. } => normal_vec(rng, v),
        ParamMeasure::Uniform { .. } => (0..v).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    measure.to_z(&t)
}

/// Twice the largest relative observation error over `count` draws from
/// the germ and parameter measures.
pub fn calibrate_audit_bound(built: &BuiltMap, direct: &DirectForward, count: usize, seed: u64) -> Result<f64> {
    let (g, v) = (built.coefficient.germ_dim(), built.coefficient.param_dim());
    let measure = built.map.space().measure();
    let mut worst = 0.0f64;
    for l in 0..count {
        let mut rng = stream(seed, "audit-calibration", l as u64);
        let xi = normal_vec(&mut rng, g);
        let z = draw_z(measure, v, &mut rng);
        worst = worst.max(relative_observation_error(built, direct, &xi, &z)?);
    }
    Ok(2.0 * worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub bound: f64,
    pub errors: Vec<f64>,
    pub passed: bool,
}

/// Direct solves at fresh germs and the given parameters (cycled) compared
/// with the surrogate.
pub fn audit(built: &BuiltMap, direct: &DirectForward, z_points: &[Vec<f64>], count: usize, bound: f64, seed: u64) -> Result<AuditReport> {
    if z_points.is_empty() {
        return Err(Error::InsufficientData("audit needs parameter values".into()));
    }
    let g = built.coefficient.germ_dim();
    let errors = (0..count)
        .map(|l| {
            let mut rng = stream(seed, "audit", l as u64);
            let xi = normal_vec(&mut rng, g);
            relative_observation_error(built, direct, &xi, &z_points[l % z_points.len()])
        })
        .collect::<Result<Vec<_>>>()?;
    let passed = errors.iter().all(|e| *e <= bound);
    Ok(AuditReport { bound, errors, passed })
}

/// Noisy observations of APM realizations.
pub fn synthesize_from_apm(family: &ApmFamily, w: &ApmParams, direct: &DirectForward, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let fields = apm_sample(family, w, direct.fem().mesh(), count, seed)?;
    fields
        .iter()
        .enumerate()
        .map(|(l, k)| {
            let mut u = direct.observe_nodal(k)?;
            direct.observation().perturb(&mut u, &mut stream(seed, "noise", l as u64));
            Ok(u)
        })
        .collect()
}

/// Noisy observations of the class coefficient at a fixed `z`.
pub fn synthesize_from_class(
    model: &dyn CoefficientModel,
    direct: &DirectForward,
    z: &[f64],
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    (0..count)
        .map(|l| {
            let mut rng = stream(seed, "class-data", l as u64);
            let xi = normal_vec(&mut rng, model.germ_dim());
            let mut u = direct.observe_cells(&model.eval(&xi, z)?)?;
            direct.observation().perturb(&mut u, &mut stream(seed, "noise", l as u64));
            Ok(u)
        })
        .collect()
}
