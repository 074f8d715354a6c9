//! Stochastic Galerkin approximation of the parametric problem
//! `−div([C](·, ξ, z) ∇u) = f` on `V_q ⊗ W^ξ ⊗ W^z`.
//!
//! Expectations over `(ξ, z)` are replaced by a fixed quadrature, and the
//! Galerkin system is solved matrix-free by conjugate gradients: each
//! quadrature node contributes `ω_q A_q ⊗ Φ(q)Φ(q)ᵀ`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::chaos::{tensor_rule, ChaosBasis, PolyFamily};
use crate::error::{Error, Result};
use crate::fem::{FemSpace, Load};
use crate::field::SymField;
use crate::klpce::{eta_from_psi, KlBasis};
use crate::linalg::{dot, pcg, BandCholesky, CgReport};
use crate::matalg::vec_sym;
use crate::repclass::{bounds, rep_forward, BoundContext, NormalizationField, RepKind};
use crate::rng::{normal, stream};
use crate::stiefel::StiefelChart;

pub const CG_TOL: f64 = 1e-10;

/// Largest `N_g + ν` for which the default quadrature is a tensor Gauss rule.
pub const TENSOR_DIM_LIMIT: usize = 8;

/// A coefficient `[C](x, ξ, z)` sampled at cell centroids.
pub trait CoefficientModel {
    fn n_cells(&self) -> usize;
    fn germ_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    /// Uniform lower bound of the smallest eigenvalue.
    fn alpha(&self) -> f64;
    /// Packed coefficient of every cell.
    fn eval(&self, xi: &[f64], z: &[f64]) -> Result<Vec<f64>>;
    /// Upper bound `γ(ξ, z)` of `‖[C](x, ξ, z)‖_F` over the domain.
    fn gamma(&self, xi: &[f64], z: &[f64]) -> Result<f64>;
}

/// A coefficient that ignores `(ξ, z)`.
#[derive(Debug, Clone)]
pub struct DeterministicCoefficient {
    packed: Vec<f64>,
    n_cells: usize,
    germ_dim: usize,
    param_dim: usize,
    alpha: f64,
    gamma: f64,
}

impl DeterministicCoefficient {
    pub fn new(n: usize, packed: Vec<f64>, germ_dim: usize, param_dim: usize) -> Result<Self> {
        let nw = n * (n + 1) / 2;
        if nw == 0 || !packed.len().is_multiple_of(nw) {
            return Err(Error::Dimension(format!("{} packed values for n = {n}", packed.len())));
        }
        let n_cells = packed.len() / nw;
        let mut alpha = f64::INFINITY;
        let mut gamma: f64 = 0.0;
        for e in 0..n_cells {
            let c = vec_sym(n, &packed[e * nw..(e + 1) * nw])?;
            alpha = alpha.min(c.min_eigenvalue()?);
            gamma = gamma.max(c.frobenius_norm());
        }
        if !(alpha > 0.0) {
            return Err(Error::InvalidInput(format!("coefficient is not positive definite (λ_min = {alpha:e})")));
        }
        Ok(Self { packed, n_cells, germ_dim, param_dim, alpha, gamma })
    }
}

impl CoefficientModel for DeterministicCoefficient {
    fn n_cells(&self) -> usize {
        self.n_cells
    }
    fn germ_dim(&self) -> usize {
        self.germ_dim
    }
    fn param_dim(&self) -> usize {
        self.param_dim
    }
    fn alpha(&self) -> f64 {
        self.alpha
    }
    fn eval(&self, _xi: &[f64], _z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.packed.clone())
    }
    fn gamma(&self, _xi: &[f64], _z: &[f64]) -> Result<f64> {
        Ok(self.gamma)
    }
}

/// `[C](x, ξ, z) = 𝒦(x, ξ, M_[a](z))`: the truncated KL/chaos representation
/// with chaos coefficients moved along the Stiefel chart.
#[derive(Debug, Clone)]
pub struct ParametricCoefficient {
    kind: RepKind,
    norm: NormalizationField,
    mean: SymField,
    scaled_modes: Vec<SymField>,
    ctx: BoundContext,
    basis: ChaosBasis,
    chart: StiefelChart,
}

impl ParametricCoefficient {
    /// `norm` and `kl` live on mesh nodes; both are averaged onto centroids.
    /// `basis` is the chaos without the constant term, one row of `[a]` per
    /// basis function.
    pub fn new(
        kind: RepKind,
        norm: &NormalizationField,
        kl: &KlBasis,
        basis: ChaosBasis,
        chart: StiefelChart,
        mesh: &crate::mesh::Mesh,
    ) -> Result<Self> {
        if chart.base().rows() != basis.len() || chart.base().m() != kl.m() {
            return Err(Error::Dimension(format!(
                "chart is {}×{}, chaos has {} terms and KL {} modes",
                chart.base().rows(),
                chart.base().m(),
                basis.len(),
                kl.m()
            )));
        }
        if norm.n() != kl.n() || mesh.dim() != kl.n() {
            return Err(Error::Dimension(format!("coefficient of size {} on a {}-dimensional mesh", kl.n(), mesh.dim())));
        }
        let scaled_modes = kl
            .sigma()
            .iter()
            .zip(kl.modes())
            .map(|(s, g)| {
                let mut c = g.to_centroids(mesh)?;
                c.as_mut_slice().iter_mut().for_each(|v| *v *= libm::sqrt(*s));
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind,
            norm: norm.to_centroids(mesh)?,
            mean: kl.mean().to_centroids(mesh)?,
            scaled_modes,
            ctx: kl.bound_context(),
            basis,
            chart,
        })
    }

    pub fn chart(&self) -> &StiefelChart {
        &self.chart
    }

    pub fn basis(&self) -> &ChaosBasis {
        &self.basis
    }

    pub fn kind(&self) -> &RepKind {
        &self.kind
    }

    pub fn eta(&self, xi: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let y = self.chart.map(z)?;
        Ok(eta_from_psi(&y, &self.basis.eval(xi)))
    }

    /// `G` at every centroid for coordinates `eta`.
    pub fn g_field(&self, eta: &[f64]) -> SymField {
        let mut g = self.mean.clone();
        for (mode, e) in self.scaled_modes.iter().zip(eta) {
            g.axpy(*e, mode);
        }
        g
    }

    pub fn coefficient_from_eta(&self, eta: &[f64]) -> Result<Vec<f64>> {
        let g = self.g_field(eta);
        let n = g.n();
        let nw = g.n_w();
        let mut out = vec![0.0; g.points() * nw];
        for e in 0..g.points() {
            let k0 = rep_forward(&self.kind, &g.at(e))?;
            let k = self.norm.normalize(&k0, e);
            out[e * nw..(e + 1) * nw].copy_from_slice(&crate::matalg::sym_vec(&k));
            debug_assert_eq!(k.n(), n);
        }
        Ok(out)
    }
}

impl CoefficientModel for ParametricCoefficient {
    fn n_cells(&self) -> usize {
        self.mean.points()
    }
    fn germ_dim(&self) -> usize {
        self.basis.dim()
    }
    fn param_dim(&self) -> usize {
        self.chart.tangent_dim()
    }
    fn alpha(&self) -> f64 {
        self.norm.k_eps()
    }
    fn eval(&self, xi: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.coefficient_from_eta(&self.eta(xi, z)?)
    }
    fn gamma(&self, xi: &[f64], z: &[f64]) -> Result<f64> {
        Ok(bounds(&self.kind, &self.norm, &self.ctx, &self.eta(xi, z)?, None).gamma)
    }
}

/// Probability measure `Γ_ν` on the parameter `z`, as the image of a
/// standard variable `t` (standard Gaussian or uniform on `[−1, 1]`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamMeasure {
    Gaussian { scale: f64 },
    Uniform { half_width: f64 },
}

impl Default for ParamMeasure {
    fn default() -> Self {
        ParamMeasure::Gaussian { scale: 1.0 }
    }
}

impl ParamMeasure {
    pub fn family(self) -> PolyFamily {
        match self {
            ParamMeasure::Gaussian { .. } => PolyFamily::Hermite,
            ParamMeasure::Uniform { .. } => PolyFamily::Legendre,
        }
    }

    fn width(self) -> f64 {
        match self {
            ParamMeasure::Gaussian { scale } => scale,
            ParamMeasure::Uniform { half_width } => half_width,
        }
    }

    pub fn to_z(self, t: &[f64]) -> Vec<f64> {
        t.iter().map(|v| v * self.width()).collect()
    }

    pub fn to_t(self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|v| v / self.width()).collect()
    }

    /// Whether `z` lies in the support (always true for the Gaussian).
    pub fn contains(self, z: &[f64]) -> bool {
        match self {
            ParamMeasure::Gaussian { .. } => true,
            ParamMeasure::Uniform { half_width } => z.iter().all(|v| v.abs() <= half_width),
        }
    }
}

/// `W_p = W^ξ ⊗ W^z`, each a total-degree chaos including the constant.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticSpace {
    germ: ChaosBasis,
    param: ChaosBasis,
    measure: ParamMeasure,
}

impl StochasticSpace {
    pub fn new(germ_dim: usize, germ_degree: usize, param_dim: usize, param_degree: usize, measure: ParamMeasure) -> Self {
        Self {
            germ: ChaosBasis::hermite(germ_dim, germ_degree, true),
            param: ChaosBasis::new(measure.family(), param_dim, param_degree, true),
            measure,
        }
    }

    pub fn from_bases(germ: ChaosBasis, param: ChaosBasis, measure: ParamMeasure) -> Result<Self> {
        if germ.family() != PolyFamily::Hermite || param.family() != measure.family() {
            return Err(Error::InvalidInput("chaos families do not match the measures".into()));
        }
        Ok(Self { germ, param, measure })
    }

    pub fn germ(&self) -> &ChaosBasis {
        &self.germ
    }

    pub fn param(&self) -> &ChaosBasis {
        &self.param
    }

    pub fn measure(&self) -> ParamMeasure {
        self.measure
    }

    pub fn len(&self) -> usize {
        self.germ.len() * self.param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn eval_germ(&self, xi: &[f64]) -> Vec<f64> {
        self.germ.eval(xi)
    }

    pub fn eval_param(&self, z: &[f64]) -> Vec<f64> {
        self.param.eval(&self.measure.to_t(z))
    }
}

/// Nodes and weights approximating `E_Γ` on `ℝ^{N_g} × ℝ^ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamQuadrature {
    pub xi: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub monte_carlo: bool,
}

impl ParamQuadrature {
    /// Tensor Gauss rule with `points` nodes per direction.
    pub fn tensor(germ_dim: usize, param_dim: usize, measure: ParamMeasure, points: usize) -> Result<Self> {
        let mut rules = vec![PolyFamily::Hermite.rule(points)?; germ_dim];
        rules.extend(core::iter::repeat_n(measure.family().rule(points)?, param_dim));
        let (nodes, weights) = tensor_rule(&rules);
        let (xi, z) = nodes
            .into_iter()
            .map(|mut p| {
                let t = p.split_off(germ_dim);
                (p, measure.to_z(&t))
            })
            .unzip();
        Ok(Self { xi, z, weights, monte_carlo: false })
    }

    pub fn monte_carlo(germ_dim: usize, param_dim: usize, measure: ParamMeasure, count: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidInput("Monte Carlo quadrature needs at least one point".into()));
        }
        let mut rng = stream(seed, "quadrature", 0);
        let mut xi = Vec::with_capacity(count);
        let mut z = Vec::with_capacity(count);
        for _ in 0..count {
            xi.push((0..germ_dim).map(|_| normal(&mut rng)).collect());
            let t: Vec<f64> = match measure {
                ParamMeasure::Gaussian { .. } => (0..param_dim).map(|_| normal(&mut rng)).collect(),
                ParamMeasure::Uniform { .. } => (0..param_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            z.push(measure.to_z(&t));
        }
        Ok(Self { xi, z, weights: vec![1.0 / count as f64; count], monte_carlo: true })
    }

    /// Tensor Gauss for `N_g + ν ≤ 8`, Monte Carlo with `mc_count` points beyond.
    pub fn auto(germ_dim: usize, param_dim: usize, measure: ParamMeasure, points: usize, mc_count: usize, seed: u64) -> Result<Self> {
        if germ_dim + param_dim <= TENSOR_DIM_LIMIT {
            Self::tensor(germ_dim, param_dim, measure, points)
        } else {
            Self::monte_carlo(germ_dim, param_dim, measure, mc_count, seed)
        }
    }

    pub fn single(xi: Vec<f64>, z: Vec<f64>) -> Self {
        Self { xi: vec![xi], z: vec![z], weights: vec![1.0], monte_carlo: true }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `w^x ⊗ w^ξ ⊗ w^z`
#[derive(Debug, Clone, PartialEq)]
pub struct RankOneTerm {
    pub wx: Vec<f64>,
    pub wy: Vec<f64>,
    pub wz: Vec<f64>,
}

/// Coefficients of a map in `V_q ⊗ W^ξ ⊗ W^z`. The dense layout stores entry
/// `(i, j, k)` at `i + n_dof·(j + P_ξ·k)`.
#[derive(Debug, Clone, PartialEq)]
pub enum MapTensor {
    Dense(Vec<f64>),
    Cp(Vec<RankOneTerm>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionMap {
    n_dof: usize,
    space: StochasticSpace,
    tensor: MapTensor,
    tau: Option<f64>,
}

impl SolutionMap {
    pub fn new(n_dof: usize, space: StochasticSpace, tensor: MapTensor, tau: Option<f64>) -> Result<Self> {
        let (pg, pp) = (space.germ.len(), space.param.len());
        match &tensor {
            MapTensor::Dense(u) => {
                if u.len() != n_dof * pg * pp {
                    return Err(Error::Dimension(format!("dense tensor of length {} for {n_dof}×{pg}×{pp}", u.len())));
                }
                if u.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Invariant("non-finite map coefficient".into()));
                }
            }
            MapTensor::Cp(terms) => {
                for t in terms {
                    if t.wx.len() != n_dof || t.wy.len() != pg || t.wz.len() != pp {
                        return Err(Error::Dimension("rank-one factor sizes do not match the spaces".into()));
                    }
                    if t.wx.iter().chain(&t.wy).chain(&t.wz).any(|v| !v.is_finite()) {
                        return Err(Error::Invariant("non-finite rank-one factor".into()));
                    }
                }
            }
        }
        Ok(Self { n_dof, space, tensor, tau })
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dof
    }

    pub fn space(&self) -> &StochasticSpace {
        &self.space
    }

    pub fn tensor(&self) -> &MapTensor {
        &self.tensor
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    /// Number of rank-one terms, or `None` for a dense map.
    pub fn rank(&self) -> Option<usize> {
        match &self.tensor {
            MapTensor::Dense(_) => None,
            MapTensor::Cp(t) => Some(t.len()),
        }
    }

    /// `u(·, ξ, z)` on the interior dofs, ignoring any truncation.
    pub fn evaluate_dofs(&self, xi: &[f64], z: &[f64]) -> Vec<f64> {
        let pg = self.space.eval_germ(xi);
        let pp = self.space.eval_param(z);
        contract(self.n_dof, &self.tensor, &pg, &pp)
    }

    /// `None` where `γ(ξ, z) > τ`, i.e. outside the support of `W_p^τ`.
    pub fn evaluate_truncated(&self, xi: &[f64], z: &[f64], gamma: f64) -> Option<Vec<f64>> {
        match self.tau {
            Some(tau) if gamma > tau => None,
            _ => Some(self.evaluate_dofs(xi, z)),
        }
    }

    /// For fixed `z`, the coefficient vectors `c_j` of `u(·, ξ, z) = Σ_j c_j Ψ_j(ξ)`.
    pub fn germ_coefficients(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let pp = self.space.eval_param(z);
        let ng = self.space.germ.len();
        let n = self.n_dof;
        let mut out = vec![vec![0.0; n]; ng];
        match &self.tensor {
            MapTensor::Dense(u) => {
                for (k, pk) in pp.iter().enumerate() {
                    for (j, c) in out.iter_mut().enumerate() {
                        let block = &u[n * (j + ng * k)..n * (j + ng * k + 1)];
                        c.iter_mut().zip(block).for_each(|(a, b)| *a += pk * b);
                    }
                }
            }
            MapTensor::Cp(terms) => {
                for t in terms {
                    let s = dot(&t.wz, &pp);
                    for (c, wy) in out.iter_mut().zip(&t.wy) {
                        c.iter_mut().zip(&t.wx).for_each(|(a, b)| *a += s * wy * b);
                    }
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Vec<f64> {
        match &self.tensor {
            MapTensor::Dense(u) => u.clone(),
            MapTensor::Cp(terms) => cp_to_dense(self.n_dof, self.space.germ.len(), self.space.param.len(), terms),
        }
    }
}

pub(crate) fn cp_to_dense(n: usize, ng: usize, np: usize, terms: &[RankOneTerm]) -> Vec<f64> {
    let mut u = vec![0.0; n * ng * np];
    for t in terms {
        for (k, wz) in t.wz.iter().enumerate() {
            for (j, wy) in t.wy.iter().enumerate() {
                let s = wy * wz;
                let block = &mut u[n * (j + ng * k)..n * (j + ng * k + 1)];
                block.iter_mut().zip(&t.wx).for_each(|(a, b)| *a += s * b);
            }
        }
    }
    u
}

fn contract(n: usize, tensor: &MapTensor, pg: &[f64], pp: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; n];
    match tensor {
        MapTensor::Dense(u) => contract_dense(n, u, pg, pp, &mut v),
        MapTensor::Cp(terms) => {
            for t in terms {
                let s = dot(&t.wy, pg) * dot(&t.wz, pp);
                v.iter_mut().zip(&t.wx).for_each(|(a, b)| *a += s * b);
            }
        }
    }
    v
}

fn contract_dense(n: usize, u: &[f64], pg: &[f64], pp: &[f64], v: &mut [f64]) {
    let ng = pg.len();
    v.iter_mut().for_each(|a| *a = 0.0);
    for (k, pk) in pp.iter().enumerate() {
        for (j, pj) in pg.iter().enumerate() {
            let s = pj * pk;
            if s == 0.0 {
                continue;
            }
            let block = &u[n * (j + ng * k)..n * (j + ng * k + 1)];
            v.iter_mut().zip(block).for_each(|(a, b)| *a += s * b);
        }
    }
}

/// `u(x, ξ, z)` at a point of the domain.
pub fn evaluate_map(space: &FemSpace, map: &SolutionMap, x: &[f64], xi: &[f64], z: &[f64]) -> Result<f64> {
    space.evaluate(&map.evaluate_dofs(xi, z), x)
}

/// The quadrature-discretized Galerkin problem.
#[derive(Debug, Clone)]
pub struct GalerkinProblem {
    fem: FemSpace,
    space: StochasticSpace,
    quad: ParamQuadrature,
    load: Vec<f64>,
    coeffs: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    gamma: Vec<f64>,
    /// `w_q·I{γ_q ≤ τ}`
    omega: Vec<f64>,
    psi_g: Vec<Vec<f64>>,
    psi_p: Vec<Vec<f64>>,
    alpha: f64,
    tau: Option<f64>,
    precond: BandCholesky,
}

impl GalerkinProblem {
    pub fn assemble(
        fem: FemSpace,
        model: &dyn CoefficientModel,
        load: &Load,
        space: StochasticSpace,
        quad: ParamQuadrature,
        tau: Option<f64>,
    ) -> Result<Self> {
        if model.n_cells() != fem.mesh().n_cells() {
            return Err(Error::Dimension(format!("coefficient on {} cells, mesh has {}", model.n_cells(), fem.mesh().n_cells())));
        }
        if model.germ_dim() != space.germ.dim() || model.param_dim() != space.param.dim() {
            return Err(Error::Dimension(format!(
                "coefficient depends on ({}, {}) variables, chaos spaces on ({}, {})",
                model.germ_dim(),
                model.param_dim(),
                space.germ.dim(),
                space.param.dim()
            )));
        }
        let n = fem.mesh().dim();
        let nw = fem.n_w();
        let q_len = quad.len();
        let mut coeffs = Vec::with_capacity(q_len);
        let mut values = Vec::with_capacity(q_len);
        let mut gamma = Vec::with_capacity(q_len);
        let mut omega = Vec::with_capacity(q_len);
        let mut psi_g = Vec::with_capacity(q_len);
        let mut psi_p = Vec::with_capacity(q_len);
        for q in 0..q_len {
            let (xi, z) = (&quad.xi[q], &quad.z[q]);
            let c = model
                .eval(xi, z)
                .map_err(|e| Error::Solver(format!("coefficient evaluation failed at quadrature node {q} (ξ = {xi:?}, z = {z:?}): {e}")))?;
            for e in 0..model.n_cells() {
                let ce = vec_sym(n, &c[e * nw..(e + 1) * nw])?;
                let lmin = ce.min_eigenvalue()?;
                if !(lmin > 0.0) {
                    return Err(Error::Solver(format!(
                        "indefinite coefficient at quadrature node {q} (ξ = {xi:?}, z = {z:?}), cell {e}: λ_min = {lmin:e}"
                    )));
                }
            }
            let g = model.gamma(xi, z)?;
            let keep = tau.is_none_or(|t| g <= t);
            values.push(fem.assemble(&c)?);
            coeffs.push(c);
            gamma.push(g);
            omega.push(if keep { quad.weights[q] } else { 0.0 });
            psi_g.push(space.eval_germ(xi));
            psi_p.push(space.eval_param(z));
        }
        let total: f64 = omega.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidInput("truncation level removes every quadrature node".into()));
        }
        let mut mean = vec![0.0; fem.pattern().nnz()];
        for (v, w) in values.iter().zip(&omega) {
            if *w > 0.0 {
                mean.iter_mut().zip(v).for_each(|(m, x)| *m += w * x);
            }
        }
        let precond = BandCholesky::factor(fem.pattern(), &mean)
            .map_err(|e| Error::Solver(format!("mean stiffness is not positive definite: {e}")))?;
        let load = fem.load_vector(load)?;
        Ok(Self { fem, space, quad, load, coeffs, values, gamma, omega, psi_g, psi_p, alpha: model.alpha(), tau, precond })
    }

    pub fn fem(&self) -> &FemSpace {
        &self.fem
    }

    pub fn space(&self) -> &StochasticSpace {
        &self.space
    }

    pub fn quadrature(&self) -> &ParamQuadrature {
        &self.quad
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    pub fn gamma_at_nodes(&self) -> &[f64] {
        &self.gamma
    }

    pub fn load(&self) -> &[f64] {
        &self.load
    }

    pub fn n_dofs(&self) -> usize {
        self.fem.n_dofs()
    }

    /// `dim V_q · dim W^ξ · dim W^z`
    pub fn dim(&self) -> usize {
        self.n_dofs() * self.space.len()
    }

    pub(crate) fn stiffness(&self, q: usize) -> &[f64] {
        &self.values[q]
    }

    pub(crate) fn omega(&self, q: usize) -> f64 {
        self.omega[q]
    }

    pub(crate) fn psi_germ(&self, q: usize) -> &[f64] {
        &self.psi_g[q]
    }

    pub(crate) fn psi_param(&self, q: usize) -> &[f64] {
        &self.psi_p[q]
    }

    /// Whether quadrature node `q` survives the truncation.
    pub fn kept(&self, q: usize) -> bool {
        self.omega[q] > 0.0 || self.tau.is_none_or(|t| self.gamma[q] <= t)
    }

    /// The Galerkin operator applied to a dense tensor.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let n = self.n_dofs();
        let ng = self.space.germ.len();
        let mut v = vec![0.0; n];
        let mut y = vec![0.0; n];
        out.iter_mut().for_each(|a| *a = 0.0);
        for q in 0..self.quad.len() {
            let w = self.omega[q];
            if w == 0.0 {
                continue;
            }
            contract_dense(n, u, &self.psi_g[q], &self.psi_p[q], &mut v);
            self.fem.pattern().matvec_with(&self.values[q], &v, &mut y);
            for (k, pk) in self.psi_p[q].iter().enumerate() {
                for (j, pj) in self.psi_g[q].iter().enumerate() {
                    let s = w * pj * pk;
                    if s == 0.0 {
                        continue;
                    }
                    let block = &mut out[n * (j + ng * k)..n * (j + ng * k + 1)];
                    block.iter_mut().zip(&y).for_each(|(a, b)| *a += s * b);
                }
            }
        }
    }

    /// `F(v_J) = ⟨f, ·⟩ E_Γ{I Φ_J}`
    pub fn rhs(&self) -> Vec<f64> {
        let n = self.n_dofs();
        let ng = self.space.germ.len();
        let mut out = vec![0.0; self.dim()];
        for q in 0..self.quad.len() {
            let w = self.omega[q];
            if w == 0.0 {
                continue;
            }
            for (k, pk) in self.psi_p[q].iter().enumerate() {
                for (j, pj) in self.psi_g[q].iter().enumerate() {
                    let s = w * pj * pk;
                    let block = &mut out[n * (j + ng * k)..n * (j + ng * k + 1)];
                    block.iter_mut().zip(&self.load).for_each(|(a, b)| *a += s * b);
                }
            }
        }
        out
    }

    fn precondition(&self, r: &[f64], z: &mut [f64]) {
        let n = self.n_dofs();
        z.copy_from_slice(r);
        for block in z.chunks_mut(n) {
            self.precond.solve_in_place(block);
        }
    }

    /// Full Galerkin solve by preconditioned conjugate gradients.
    pub fn solve(&self, tol: f64, max_iter: usize) -> Result<(SolutionMap, CgReport)> {
        let b = self.rhs();
        let mut x = vec![0.0; b.len()];
        let report = pcg(|u, out| self.apply(u, out), |r, z| self.precondition(r, z), &b, &mut x, tol, max_iter)?;
        let map = SolutionMap::new(self.n_dofs(), self.space.clone(), MapTensor::Dense(x), self.tau)?;
        Ok((map, report))
    }

    /// `‖A u − F‖/‖F‖` for a dense tensor.
    pub fn relative_residual(&self, u: &[f64]) -> f64 {
        let b = self.rhs();
        let mut r = vec![0.0; b.len()];
        self.apply(u, &mut r);
        let num: f64 = r.iter().zip(&b).map(|(a, c)| (a - c) * (a - c)).sum();
        libm::sqrt(num) / crate::linalg::norm2(&b).max(f64::MIN_POSITIVE)
    }

    /// `u_N(·, ξ_q, z_q)` at every quadrature node, zero where truncated.
    pub fn map_at_nodes(&self, map: &SolutionMap) -> Vec<Vec<f64>> {
        self.tensor_at_nodes(map.tensor())
    }

    pub fn tensor_at_nodes(&self, tensor: &MapTensor) -> Vec<Vec<f64>> {
        (0..self.quad.len())
            .map(|q| if self.kept(q) { contract(self.n_dofs(), tensor, &self.psi_g[q], &self.psi_p[q]) } else { vec![0.0; self.n_dofs()] })
            .collect()
    }

    /// Direct solves at every quadrature node: the exact solution of the
    /// quadrature-discretized problem, used as reference.
    pub fn reference_solutions(&self) -> Result<Vec<Vec<f64>>> {
        self.values.iter().map(|v| self.fem.solve_with(v, &self.load)).collect()
    }

    /// Energy norms of a function given by its values at the quadrature nodes.
    pub fn energy_norms(&self, v: &[Vec<f64>]) -> Result<NormReport> {
        if v.len() != self.quad.len() {
            return Err(Error::Dimension(format!("{} node values for {} quadrature nodes", v.len(), self.quad.len())));
        }
        let n = self.fem.mesh().dim();
        let nw = self.fem.n_w();
        let pattern = self.fem.pattern();
        let (mut x, mut c, mut c2, mut g, mut gc, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let mut squared = vec![0.0; self.coeffs.first().map_or(0, Vec::len)];
        for (q, vq) in v.iter().enumerate() {
            let w = self.quad.weights[q];
            let gam = self.gamma[q];
            let lap = pattern.quadratic_form_with(self.fem.laplace_values(), vq);
            let cq = pattern.quadratic_form_with(&self.values[q], vq);
            for e in 0..self.coeffs[q].len() / nw {
                let ce = vec_sym(n, &self.coeffs[q][e * nw..(e + 1) * nw])?;
                squared[e * nw..(e + 1) * nw].copy_from_slice(&crate::matalg::sym_vec(&ce.sym_product(&ce)));
            }
            let c2q = pattern.quadratic_form_with(&self.fem.assemble(&squared)?, vq);
            x += w * lap;
            c += w * cq;
            c2 += w * c2q;
            g += w * gam * lap;
            gc += w * gam * cq;
            g2 += w * gam * gam * lap;
        }
        let s = |v: f64| libm::sqrt(v.max(0.0));
        Ok(NormReport { alpha: self.alpha, x: s(x), c: s(c), c2: s(c2), gamma: s(g), gamma_c: s(gc), gamma2: s(g2) })
    }

    /// Node-wise difference `a − b`.
    pub fn difference(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect()).collect()
    }

    /// `‖u_ref − u_N‖_{X^(C)}` with `u_ref` the per-node reference.
    pub fn energy_error(&self, reference: &[Vec<f64>], map: &SolutionMap) -> Result<f64> {
        Ok(self.energy_norms(&Self::difference(reference, &self.map_at_nodes(map)))?.c)
    }

    /// Bilinear form `a(u, v)` of node values, over the kept nodes.
    pub fn a_form(&self, u: &[Vec<f64>], v: &[Vec<f64>]) -> f64 {
        let mut y = vec![0.0; self.n_dofs()];
        let mut total = 0.0;
        for q in 0..self.quad.len() {
            if self.omega[q] == 0.0 {
                continue;
            }
            self.fem.pattern().matvec_with(&self.values[q], &u[q], &mut y);
            total += self.omega[q] * dot(&y, &v[q]);
        }
        total
    }

    /// `F(v) = E_Γ{I ⟨f, v⟩}`
    pub fn f_form(&self, v: &[Vec<f64>]) -> f64 {
        (0..self.quad.len()).map(|q| self.omega[q] * dot(&self.load, &v[q])).sum()
    }

    /// Per-node stability `‖u‖_{H¹₀} ≤ ‖f‖_{H⁻¹}/α`; returns the largest ratio
    /// of the left side to the right side.
    pub fn stability_ratio(&self, samples: &[Vec<f64>]) -> f64 {
        let bound = self.fem.dual_norm(&self.load) / self.alpha;
        samples.iter().map(|u| self.fem.h1_norm(u) / bound).fold(0.0, f64::max)
    }

    /// `min vᵀA_q v / (α vᵀK_I v)` over the given vectors and all nodes.
    pub fn coercivity_ratio(&self, vectors: &[Vec<f64>]) -> f64 {
        let p = self.fem.pattern();
        let mut worst = f64::INFINITY;
        for v in vectors {
            let lap = p.quadratic_form_with(self.fem.laplace_values(), v);
            if lap <= 0.0 {
                continue;
            }
            for vals in &self.values {
                worst = worst.min(p.quadratic_form_with(vals, v) / (self.alpha * lap));
            }
        }
        worst
    }
}

/// Quadrature estimates of the norms of `X^{(γ^s C^r)}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormReport {
    pub alpha: f64,
    pub x: f64,
    pub c: f64,
    /// `‖v‖_{X^(C²)}`
    pub c2: f64,
    pub gamma: f64,
    /// `‖v‖_{X^(γC)}`
    pub gamma_c: f64,
    /// `‖v‖_{X^(γ²)}`
    pub gamma2: f64,
}

impl NormReport {
    /// `√α‖v‖_X ≤ ‖v‖_C ≤ ‖v‖_γ`, `√α‖v‖_C ≤ ‖v‖_{C²} ≤ ‖v‖_{γC} ≤ ‖v‖_{γ²}`,
    /// each with relative slack.
    pub fn chain_holds(&self, slack: f64) -> bool {
        let le = |a: f64, b: f64| a <= b * (1.0 + slack) + f64::MIN_POSITIVE;
        let sa = libm::sqrt(self.alpha);
        le(sa * self.x, self.c)
            && le(self.c, self.gamma)
            && le(sa * self.c, self.c2)
            && le(self.c2, self.gamma_c)
            && le(self.gamma_c, self.gamma2)
    }

    /// The chain `α^{3/2}‖v‖_X ≤ α‖v‖_C ≤ ‖v‖_{C²} ≤ ‖v‖_{γC} ≤ ‖v‖_{γ²}`
    /// as usually stated; its middle step needs `α ≤ 1`.
    pub fn stated_chain_holds(&self, slack: f64) -> bool {
        let le = |a: f64, b: f64| a <= b * (1.0 + slack) + f64::MIN_POSITIVE;
        let a = self.alpha;
        le(a * libm::sqrt(a) * self.x, a * self.c) && le(a * self.c, self.c2) && le(self.c2, self.gamma_c) && le(self.gamma_c, self.gamma2)
    }
}

/// 1D scalar field with `m` cosine KL modes under the square representation.
#[cfg(test)]
pub(crate) fn toy_coefficient_with(mesh: &crate::mesh::Mesh, basis: ChaosBasis, m: usize) -> ParametricCoefficient {
    use crate::matalg::SymMatrix;
    use crate::repclass::SquashFunction;
    use crate::stiefel::StiefelPoint;
    let p = mesh.n_nodes();
    let mean = SymField::from_packed(1, vec![0.1; p]).unwrap();
    let modes: Vec<SymField> = (0..m)
        .map(|i| {
            let v = (0..p)
                .map(|k| {
                    let x = mesh.node(k)[0];
                    libm::sqrt(2.0) * libm::cos((i + 1) as f64 * core::f64::consts::PI * x)
                })
                .collect();
            SymField::from_packed(1, v).unwrap()
        })
        .collect();
    let sigma: Vec<f64> = (0..m).map(|i| 0.08 / (i + 1) as f64).collect();
    let kl = KlBasis::new(mean, sigma, modes, mesh.node_weights(), 0.1).unwrap();
    let norm = NormalizationField::constant(&SymMatrix::identity(1), p, 1e-2).unwrap();
    let base = StiefelPoint::canonical(basis.len(), m).unwrap();
    let chart = StiefelChart::new(base, 1.0).unwrap();
    let kind = RepKind::Square(SquashFunction::apm(1, 0.5).unwrap());
    ParametricCoefficient::new(kind, &norm, &kl, basis, chart, mesh).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Mesh;

    fn line(cells: usize) -> FemSpace {
        FemSpace::new(Mesh::interval(cells, 0.0, 1.0).unwrap()).unwrap()
    }

    fn toy_coefficient(mesh: &Mesh, germ_dim: usize, degree: usize, m: usize) -> ParametricCoefficient {
        toy_coefficient_with(mesh, ChaosBasis::hermite(germ_dim, degree, false), m)
    }

    #[test]
    fn deterministic_coefficient_gives_constant_mode() {
        let fem = line(16);
        let coeff: Vec<f64> = (0..16).map(|e| 1.0 + 0.5 * libm::sin(e as f64)).collect();
        let model = DeterministicCoefficient::new(1, coeff.clone(), 1, 1).unwrap();
        let space = StochasticSpace::new(1, 2, 1, 2, ParamMeasure::default());
        let quad = ParamQuadrature::tensor(1, 1, ParamMeasure::default(), 3).unwrap();
        let prob = GalerkinProblem::assemble(fem.clone(), &model, &Load::Constant(1.0), space, quad, None).unwrap();
        let (map, _) = prob.solve(1e-12, 500).unwrap();
        let det = fem.solve_det(&coeff, &Load::Constant(1.0)).unwrap();
        let u = map.to_dense();
        let n = fem.n_dofs();
        for i in 0..n {
            assert!((u[i] - det[i]).abs() < 1e-10);
        }
        assert!(u[n..].iter().all(|v| v.abs() < 1e-10));
        let at = map.evaluate_dofs(&[0.3], &[-1.2]);
        for (a, b) in at.iter().zip(&det) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn single_point_degree_zero_matches_direct_solve() {
        let mesh = Mesh::interval(20, 0.0, 1.0).unwrap();
        let model = toy_coefficient(&mesh, 1, 2, 1);
        let fem = FemSpace::new(mesh).unwrap();
        let (xi, z) = (vec![0.7], vec![0.4]);
        let space = StochasticSpace::new(1, 0, model.param_dim(), 0, ParamMeasure::default());
        let quad = ParamQuadrature::single(xi.clone(), z.clone());
        let prob = GalerkinProblem::assemble(fem.clone(), &model, &Load::Constant(1.0), space, quad, None).unwrap();
        let (map, _) = prob.solve(1e-13, 500).unwrap();
        let det = fem.solve_det(&model.eval(&xi, &z).unwrap(), &Load::Constant(1.0)).unwrap();
        for (a, b) in map.to_dense().iter().zip(&det) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn galerkin_orthogonality_and_monotone_error() {
        let mesh = Mesh::interval(24, 0.0, 1.0).unwrap();
        let model = toy_coefficient(&mesh, 1, 2, 1);
        let fem = FemSpace::new(mesh).unwrap();
        let nu = model.param_dim();
        let quad = ParamQuadrature::tensor(1, nu, ParamMeasure::default(), 7).unwrap();
        let mut last = f64::INFINITY;
        for p in 1..=3 {
            let space = StochasticSpace::new(1, p, nu, p, ParamMeasure::default());
            let prob = GalerkinProblem::assemble(fem.clone(), &model, &Load::Constant(1.0), space, quad.clone(), None).unwrap();
            let (map, _) = prob.solve(1e-12, 1000).unwrap();
            let reference = prob.reference_solutions().unwrap();
            let err_nodes = GalerkinProblem::difference(&reference, &prob.map_at_nodes(&map));
            // a(u − u_N, v_N) = 0 for v_N = u_N
            let ortho = prob.a_form(&err_nodes, &prob.map_at_nodes(&map));
            let scale = prob.a_form(&reference, &reference);
            assert!(ortho.abs() <= 1e-8 * scale);
            let err = prob.energy_error(&reference, &map).unwrap();
            assert!(err <= last * (1.0 + 1e-10), "p = {p}: {err} > {last}");
            last = err;
            assert!(prob.stability_ratio(&reference) <= 1.05);
        }
    }

    #[test]
    fn constant_coefficient_norm_scaling() {
        let fem = line(10);
        let c = 2.5;
        let model = DeterministicCoefficient::new(1, vec![c; 10], 1, 0).unwrap();
        let space = StochasticSpace::new(1, 1, 0, 0, ParamMeasure::default());
        let quad = ParamQuadrature::tensor(1, 0, ParamMeasure::default(), 3).unwrap();
        let prob = GalerkinProblem::assemble(fem, &model, &Load::Constant(1.0), space, quad, None).unwrap();
        let v: Vec<Vec<f64>> = (0..3).map(|q| (0..9).map(|i| libm::sin((i * (q + 2)) as f64)).collect()).collect();
        let r = prob.energy_norms(&v).unwrap();
        assert!((r.c * r.c - c * r.x * r.x).abs() < 1e-12 * r.c * r.c);
        let zero = prob.energy_norms(&vec![vec![0.0; 9]; 3]).unwrap();
        assert_eq!((zero.x, zero.c, zero.gamma), (0.0, 0.0, 0.0));
    }

    #[test]
    fn norm_chain_and_coercivity_on_random_vectors() {
        let mesh = Mesh::interval(12, 0.0, 1.0).unwrap();
        let model = toy_coefficient(&mesh, 1, 2, 1);
        let fem = FemSpace::new(mesh).unwrap();
        let nu = model.param_dim();
        let quad = ParamQuadrature::tensor(1, nu, ParamMeasure::default(), 4).unwrap();
        let space = StochasticSpace::new(1, 2, nu, 1, ParamMeasure::default());
        let prob = GalerkinProblem::assemble(fem, &model, &Load::Constant(1.0), space.clone(), quad, None).unwrap();
        let mut rng = stream(3, "test", 0);
        for _ in 0..100 {
            let u: Vec<f64> = (0..prob.dim()).map(|_| normal(&mut rng)).collect();
            let map = SolutionMap::new(prob.n_dofs(), space.clone(), MapTensor::Dense(u), None).unwrap();
            let r = prob.energy_norms(&prob.map_at_nodes(&map)).unwrap();
            assert!(r.chain_holds(1e-12), "{r:?}");
        }
        let vs: Vec<Vec<f64>> = (0..20).map(|_| (0..prob.n_dofs()).map(|_| normal(&mut rng)).collect()).collect();
        assert!(prob.coercivity_ratio(&vs) >= 1.0 - 1e-10);
    }

    #[test]
    fn linear_in_the_load() {
        let mesh = Mesh::interval(10, 0.0, 1.0).unwrap();
        let model = toy_coefficient(&mesh, 1, 2, 1);
        let fem = FemSpace::new(mesh).unwrap();
        let nu = model.param_dim();
        let space = StochasticSpace::new(1, 1, nu, 1, ParamMeasure::default());
        let quad = ParamQuadrature::tensor(1, nu, ParamMeasure::default(), 3).unwrap();
        let a = GalerkinProblem::assemble(fem.clone(), &model, &Load::Constant(1.0), space.clone(), quad.clone(), None).unwrap();
        let b = GalerkinProblem::assemble(fem.clone(), &model, &Load::Constant(2.0), space, quad, None).unwrap();
        let (ma, _) = a.solve(1e-13, 500).unwrap();
        let (mb, _) = b.solve(1e-13, 500).unwrap();
        let x = [0.35];
        let ua = evaluate_map(&fem, &ma, &x, &[0.2], &[0.1]).unwrap();
        let ub = evaluate_map(&fem, &mb, &x, &[0.2], &[0.1]).unwrap();
        assert!((ub - 2.0 * ua).abs() < 1e-10 * ua.abs());
    }

    #[test]
    fn truncation_zeroes_nodes_and_flags_evaluation() {
        let mesh = Mesh::interval(10, 0.0, 1.0).unwrap();
        let model = toy_coefficient(&mesh, 1, 2, 1);
        let fem = FemSpace::new(mesh).unwrap();
        let nu = model.param_dim();
        let quad = ParamQuadrature::tensor(1, nu, ParamMeasure::default(), 5).unwrap();
        let mut g: Vec<f64> = quad.xi.iter().zip(&quad.z).map(|(x, z)| model.gamma(x, z).unwrap()).collect();
        g.sort_by(f64::total_cmp);
        let tau = g[g.len() / 2];
        let space = StochasticSpace::new(1, 1, nu, 1, ParamMeasure::default());
        let prob = GalerkinProblem::assemble(fem, &model, &Load::Constant(1.0), space, quad, Some(tau)).unwrap();
        let (map, _) = prob.solve(1e-12, 1000).unwrap();
        let nodes = prob.map_at_nodes(&map);
        for (q, v) in nodes.iter().enumerate() {
            if prob.gamma_at_nodes()[q] > tau {
                assert!(v.iter().all(|x| *x == 0.0));
            }
        }
        assert!(map.evaluate_truncated(&[0.0], &[0.0], tau * 2.0).is_none());
        assert!(map.evaluate_truncated(&[0.0], &[0.0], tau).is_some());
    }

    #[test]
    fn indefinite_coefficient_names_the_node() {
        struct Bad;
        impl CoefficientModel for Bad {
            fn n_cells(&self) -> usize {
                4
            }
            fn germ_dim(&self) -> usize {
                1
            }
            fn param_dim(&self) -> usize {
                0
            }
            fn alpha(&self) -> f64 {
                1.0
            }
            fn eval(&self, xi: &[f64], _z: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![xi[0]; 4])
            }
            fn gamma(&self, _xi: &[f64], _z: &[f64]) -> Result<f64> {
                Ok(1.0)
            }
        }
        let space = StochasticSpace::new(1, 1, 0, 0, ParamMeasure::default());
        let quad = ParamQuadrature::tensor(1, 0, ParamMeasure::default(), 2).unwrap();
        let err = GalerkinProblem::assemble(line(4), &Bad, &Load::Constant(1.0), space, quad, None).unwrap_err();
        assert!(format!("{err}").contains("quadrature node 0"));
    }

    #[test]
    fn cp_and_dense_evaluate_alike() {
        let space = StochasticSpace::new(2, 2, 1, 2, ParamMeasure::default());
        let n = 5;
        let mut rng = stream(9, "test", 1);
        let terms: Vec<RankOneTerm> = (0..3)
            .map(|_| RankOneTerm {
                wx: (0..n).map(|_| normal(&mut rng)).collect(),
                wy: (0..space.germ().len()).map(|_| normal(&mut rng)).collect(),
                wz: (0..space.param().len()).map(|_| normal(&mut rng)).collect(),
            })
            .collect();
        let cp = SolutionMap::new(n, space.clone(), MapTensor::Cp(terms), None).unwrap();
        let dense = SolutionMap::new(n, space, MapTensor::Dense(cp.to_dense()), None).unwrap();
        let (xi, z) = ([0.3, -1.1], [0.8]);
        for (a, b) in cp.evaluate_dofs(&xi, &z).iter().zip(dense.evaluate_dofs(&xi, &z)) {
            assert!((a - b).abs() < 1e-12);
        }
        let gc = cp.germ_coefficients(&z);
        let psi = cp.space().eval_germ(&xi);
        let direct = cp.evaluate_dofs(&xi, &z);
        for i in 0..n {
            let s: f64 = gc.iter().zip(&psi).map(|(c, p)| c[i] * p).sum();
            assert!((s - direct[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrature_weights_are_probabilities() {
        let q = ParamQuadrature::tensor(2, 2, ParamMeasure::Uniform { half_width: 0.5 }, 3).unwrap();
        assert!((q.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(q.z.iter().flatten().all(|v| v.abs() <= 0.5));
        let mc = ParamQuadrature::auto(5, 5, ParamMeasure::default(), 3, 64, 1).unwrap();
        assert!(mc.monte_carlo && mc.len() == 64);
    }
}
