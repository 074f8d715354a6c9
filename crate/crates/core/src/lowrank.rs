//! Greedy rank-one enrichment of the Galerkin solution in canonical format.
//!
//! Each step minimizes the energy `J(v) = ½a(v, v) − F(v)` over rank-one
//! corrections `w = w^x ⊗ w^ξ ⊗ w^z` by alternating exact minimization in
//! one factor at a time.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, cholesky_solve, dot, norm2, BandCholesky, Matrix};
use crate::rng::{normal, stream};
use crate::sgalerkin::{GalerkinProblem, MapTensor, RankOneTerm, SolutionMap};

pub const GREEDY_TOL: f64 = 1e-6;
const MAX_RESTARTS: usize = 3;

/// `J(v) = ½a(v, v) − F(v)` through the problem's quadrature.
pub fn j_eval(prob: &GalerkinProblem, v: &MapTensor) -> f64 {
    j_of_nodes(prob, &prob.tensor_at_nodes(v))
}

fn j_of_nodes(prob: &GalerkinProblem, nodes: &[Vec<f64>]) -> f64 {
    0.5 * prob.a_form(nodes, nodes) - prob.f_form(nodes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlsOptions {
    pub max_sweeps: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self { max_sweeps: 50, tol: 1e-8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlsReport {
    pub term: RankOneTerm,
    /// `J(u + w) − J(u)` after every factor update.
    pub decrements: Vec<f64>,
    pub sweeps: usize,
    pub restarts: usize,
}

/// Current iterate `u` at the quadrature nodes and its residuals `f − A_q u_q`.
struct Residuals {
    nodes: Vec<Vec<f64>>,
    res: Vec<Vec<f64>>,
}

impl Residuals {
    fn new(prob: &GalerkinProblem, nodes: Vec<Vec<f64>>) -> Self {
        let mut res = Vec::with_capacity(nodes.len());
        let mut y = vec![0.0; prob.n_dofs()];
        for (q, u) in nodes.iter().enumerate() {
            prob.fem().pattern().matvec_with(prob.stiffness(q), u, &mut y);
            res.push(prob.load().iter().zip(&y).map(|(b, a)| b - a).collect());
        }
        Self { nodes, res }
    }

    fn add_term(&mut self, prob: &GalerkinProblem, t: &RankOneTerm) {
        let mut y = vec![0.0; prob.n_dofs()];
        for q in 0..self.nodes.len() {
            if !prob.kept(q) {
                continue;
            }
            let s = dot(&t.wy, prob.psi_germ(q)) * dot(&t.wz, prob.psi_param(q));
            if s == 0.0 {
                continue;
            }
            prob.fem().pattern().matvec_with(prob.stiffness(q), &t.wx, &mut y);
            for ((u, r), (x, a)) in self.nodes[q].iter_mut().zip(self.res[q].iter_mut()).zip(t.wx.iter().zip(&y)) {
                *u += s * x;
                *r -= s * a;
            }
        }
    }
}

/// Dense SPD solve with a tiny diagonal shift when the Gram matrix is singular
/// (a chaos direction invisible to the surviving quadrature nodes).
fn spd_solve(m: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    if let Ok(l) = cholesky_lower(m, 1e-14) {
        return Some(cholesky_solve(&l, b));
    }
    let n = m.rows();
    let trace: f64 = (0..n).map(|i| m[(i, i)]).sum();
    if !(trace > 0.0) {
        return None;
    }
    let shifted = Matrix::from_fn(n, n, |i, j| m[(i, j)] + if i == j { 1e-12 * trace / n as f64 } else { 0.0 });
    cholesky_lower(&shifted, 1e-14).ok().map(|l| cholesky_solve(&l, b))
}

fn normalized_random(rng: &mut crate::rng::StreamRng, len: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..len).map(|_| normal(rng)).collect();
        let n = norm2(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Exact minimization over `w^x` with `w^ξ, w^z` fixed. Returns `None` when
/// the restricted operator vanishes (a zero factor).
fn update_x(prob: &GalerkinProblem, r: &Residuals, wy: &[f64], wz: &[f64]) -> Result<Option<Vec<f64>>> {
    let nnz = prob.fem().pattern().nnz();
    let mut m = vec![0.0; nnz];
    let mut rhs = vec![0.0; prob.n_dofs()];
    let mut any = false;
    for q in 0..r.nodes.len() {
        let w = prob.omega(q);
        if w == 0.0 {
            continue;
        }
        let s = dot(wy, prob.psi_germ(q)) * dot(wz, prob.psi_param(q));
        if s == 0.0 {
            continue;
        }
        any = true;
        m.iter_mut().zip(prob.stiffness(q)).for_each(|(a, b)| *a += w * s * s * b);
        rhs.iter_mut().zip(&r.res[q]).for_each(|(a, b)| *a += w * s * b);
    }
    if !any {
        return Ok(None);
    }
    match BandCholesky::factor(prob.fem().pattern(), &m) {
        Ok(chol) => Ok(Some(chol.solve(&rhs))),
        Err(_) => Ok(None),
    }
}

/// Exact minimization over `w^ξ` (`germ`) or `w^z` with the other two
/// factors fixed; `other` is the fixed chaos factor.
fn chaos_system(prob: &GalerkinProblem, r: &Residuals, wx: &[f64], germ: bool, other: &[f64]) -> Option<Vec<f64>> {
    let len = if germ { prob.space().germ().len() } else { prob.space().param().len() };
    let mut m = Matrix::zeros(len, len);
    let mut rhs = vec![0.0; len];
    let mut y = vec![0.0; prob.n_dofs()];
    for q in 0..r.nodes.len() {
        let w = prob.omega(q);
        if w == 0.0 {
            continue;
        }
        let (own, t) =
            if germ { (prob.psi_germ(q), dot(other, prob.psi_param(q))) } else { (prob.psi_param(q), dot(other, prob.psi_germ(q))) };
        if t == 0.0 {
            continue;
        }
        prob.fem().pattern().matvec_with(prob.stiffness(q), wx, &mut y);
        let kappa = dot(wx, &y);
        let rho = dot(wx, &r.res[q]);
        let c = w * kappa * t * t;
        for i in 0..len {
            rhs[i] += w * rho * t * own[i];
            for j in 0..len {
                m[(i, j)] += c * own[i] * own[j];
            }
        }
    }
    spd_solve(&m, &rhs)
}

/// `J(u + w) − J(u) = ½a(w, w) − F(w) + a(u, w)`
fn decrement(prob: &GalerkinProblem, r: &Residuals, t: &RankOneTerm) -> f64 {
    let mut y = vec![0.0; prob.n_dofs()];
    let mut quad = 0.0;
    let mut lin = 0.0;
    for q in 0..r.nodes.len() {
        let w = prob.omega(q);
        if w == 0.0 {
            continue;
        }
        let s = dot(&t.wy, prob.psi_germ(q)) * dot(&t.wz, prob.psi_param(q));
        if s == 0.0 {
            continue;
        }
        prob.fem().pattern().matvec_with(prob.stiffness(q), &t.wx, &mut y);
        quad += w * s * s * dot(&t.wx, &y);
        lin += w * s * dot(&t.wx, &r.res[q]);
    }
    0.5 * quad - lin
}

fn normalize(t: &mut RankOneTerm) {
    let (ny, nz) = (norm2(&t.wy), norm2(&t.wz));
    if ny > 0.0 && nz > 0.0 {
        t.wy.iter_mut().for_each(|v| *v /= ny);
        t.wz.iter_mut().for_each(|v| *v /= nz);
        t.wx.iter_mut().for_each(|v| *v *= ny * nz);
    }
}

fn als_inner(prob: &GalerkinProblem, r: &Residuals, opts: &AlsOptions, index: u64) -> Result<AlsReport> {
    let n = prob.n_dofs();
    let (pg, pp) = (prob.space().germ().len(), prob.space().param().len());
    for restart in 0..=MAX_RESTARTS {
        let mut rng = stream(opts.seed, "als", index * (MAX_RESTARTS as u64 + 1) + restart as u64);
        let mut t = RankOneTerm { wx: vec![0.0; n], wy: normalized_random(&mut rng, pg), wz: normalized_random(&mut rng, pp) };
        let mut decrements = Vec::new();
        let mut zero = false;
        let mut sweeps = 0;
        let mut last = 0.0;
        for sweep in 0..opts.max_sweeps {
            sweeps = sweep + 1;
            match update_x(prob, r, &t.wy, &t.wz)? {
                Some(wx) => t.wx = wx,
                None => {
                    zero = true;
                    break;
                }
            }
            decrements.push(decrement(prob, r, &t));
            match chaos_system(prob, r, &t.wx, true, &t.wz) {
                Some(wy) => t.wy = wy,
                None => {
                    zero = true;
                    break;
                }
            }
            decrements.push(decrement(prob, r, &t));
            match chaos_system(prob, r, &t.wx, false, &t.wy) {
                Some(wz) => t.wz = wz,
                None => {
                    zero = true;
                    break;
                }
            }
            let d = decrement(prob, r, &t);
            decrements.push(d);
            if norm2(&t.wx) == 0.0 || norm2(&t.wy) == 0.0 || norm2(&t.wz) == 0.0 {
                zero = d < 0.0;
                break;
            }
            normalize(&mut t);
            if sweep > 0 && (last - d).abs() <= opts.tol * d.abs() {
                break;
            }
            last = d;
        }
        if !zero {
            return Ok(AlsReport { term: t, decrements, sweeps, restarts: restart });
        }
    }
    Err(Error::NoConvergence(format!("alternating minimization for term {index} (zero factor after {MAX_RESTARTS} restarts)")))
}

/// Best rank-one correction of the iterate given by `current` (a tensor in
/// the problem's space), seeded by `index`.
pub fn als_rank_one(prob: &GalerkinProblem, current: &MapTensor, index: u64, opts: &AlsOptions) -> Result<AlsReport> {
    let r = Residuals::new(prob, prob.tensor_at_nodes(current));
    als_inner(prob, &r, opts, index)
}

/// Largest canonical rank any tensor of the problem's space can need:
/// the smallest product of two of the three factor dimensions.
pub fn rank_bound(prob: &GalerkinProblem) -> usize {
    let (n, pg, pp) = (prob.n_dofs(), prob.space().germ().len(), prob.space().param().len());
    (n * pg).min(n * pp).min(pg * pp)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyOptions {
    pub r_max: usize,
    pub tol: f64,
    pub als: AlsOptions,
}

impl Default for GreedyOptions {
    fn default() -> Self {
        Self { r_max: 20, tol: GREEDY_TOL, als: AlsOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyState {
    pub terms: Vec<RankOneTerm>,
    /// `J(u^k)` for `k = 0, 1, …`
    pub j_history: Vec<f64>,
    /// `‖u_N − u^k‖_{X^(C)}` when the full solution was supplied.
    pub error_history: Vec<f64>,
}

impl GreedyState {
    pub fn rank(&self) -> usize {
        self.terms.len()
    }
}

/// Greedy enrichment `u^{k+1} = u^k + w^{k+1}` until the relative decrease
/// of `J` falls below `tol` or the rank reaches `r_max`.
pub fn greedy_solve(prob: &GalerkinProblem, opts: &GreedyOptions, full: Option<&SolutionMap>) -> Result<(SolutionMap, GreedyState)> {
    let n = prob.n_dofs();
    let q_len = prob.quadrature().len();
    let full_nodes = full.map(|m| prob.map_at_nodes(m));
    let mut r = Residuals::new(prob, vec![vec![0.0; n]; q_len]);
    let mut state = GreedyState { terms: Vec::new(), j_history: vec![0.0], error_history: Vec::new() };
    let record_error = |state: &mut GreedyState, nodes: &[Vec<f64>]| -> Result<()> {
        if let Some(f) = &full_nodes {
            state.error_history.push(prob.energy_norms(&GalerkinProblem::difference(f, nodes))?.c);
        }
        Ok(())
    };
    record_error(&mut state, &r.nodes)?;
    while state.terms.len() < opts.r_max {
        let report = als_inner(prob, &r, &opts.als, state.terms.len() as u64)?;
        let j_old = *state.j_history.last().expect("history starts at J(0)");
        let d = decrement(prob, &r, &report.term);
        // a candidate that does not lower J by a relative `tol` ends the loop
        if !(d < 0.0) || -d < opts.tol * (j_old + d).abs() {
            break;
        }
        r.add_term(prob, &report.term);
        state.terms.push(report.term);
        let j_new = j_of_nodes(prob, &r.nodes);
        state.j_history.push(j_new.min(j_old));
        record_error(&mut state, &r.nodes)?;
    }
    let map = SolutionMap::new(n, prob.space().clone(), MapTensor::Cp(state.terms.clone()), prob.tau())?;
    Ok((map, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaos::{ChaosBasis, PolyFamily};
    use crate::fem::{FemSpace, Load};
    use crate::mesh::Mesh;
    use crate::sgalerkin::{
        toy_coefficient_with, CoefficientModel, DeterministicCoefficient, ParamMeasure, ParamQuadrature, StochasticSpace,
    };

    fn problem(cells: usize, p: usize) -> GalerkinProblem {
        let mesh = Mesh::interval(cells, 0.0, 1.0).unwrap();
        let basis = ChaosBasis::from_indices(PolyFamily::Hermite, 2, vec![vec![1, 0], vec![0, 1], vec![2, 0]]).unwrap();
        let model = toy_coefficient_with(&mesh, basis, 1);
        assert_eq!((model.germ_dim(), model.param_dim()), (2, 2));
        let fem = FemSpace::new(mesh).unwrap();
        let quad = ParamQuadrature::tensor(2, 2, ParamMeasure::default(), p + 1).unwrap();
        let space = StochasticSpace::new(2, p, 2, p, ParamMeasure::default());
        GalerkinProblem::assemble(fem, &model, &Load::Constant(1.0), space, quad, None).unwrap()
    }

    #[test]
    fn j_of_zero_and_optimality_of_full_galerkin() {
        let prob = problem(10, 2);
        assert_eq!(j_eval(&prob, &MapTensor::Dense(vec![0.0; prob.dim()])), 0.0);
        let (map, _) = prob.solve(1e-12, 1000).unwrap();
        let u = map.to_dense();
        let ju = j_eval(&prob, map.tensor());
        let nodes = prob.map_at_nodes(&map);
        let a = prob.a_form(&nodes, &nodes);
        assert!((ju + 0.5 * a).abs() <= 1e-8 * ju.abs());
        assert!(prob.relative_residual(&u) <= 1e-10);
        let mut rng = stream(1, "test", 0);
        for _ in 0..50 {
            let v: Vec<f64> = u.iter().map(|x| x + 0.01 * normal(&mut rng)).collect();
            assert!(ju <= j_eval(&prob, &MapTensor::Dense(v)));
        }
    }

    #[test]
    fn separable_problem_is_rank_one() {
        let fem = FemSpace::new(Mesh::interval(12, 0.0, 1.0).unwrap()).unwrap();
        let model = DeterministicCoefficient::new(1, vec![1.7; 12], 1, 1).unwrap();
        let space = StochasticSpace::new(1, 2, 1, 2, ParamMeasure::default());
        let quad = ParamQuadrature::tensor(1, 1, ParamMeasure::default(), 3).unwrap();
        let nodal: Vec<f64> = (0..13).map(|i| libm::sin(i as f64 * 0.3)).collect();
        let prob = GalerkinProblem::assemble(fem, &model, &Load::Nodal(nodal), space, quad, None).unwrap();
        let (full, _) = prob.solve(1e-13, 1000).unwrap();
        let (cp, state) = greedy_solve(&prob, &GreedyOptions::default(), Some(&full)).unwrap();
        assert_eq!(state.rank(), 1);
        let (a, b) = (full.to_dense(), cp.to_dense());
        let scale = norm2(&a);
        let diff: f64 = libm::sqrt(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
        assert!(diff <= 1e-8 * scale, "{diff}");
    }

    #[test]
    fn als_decreases_j_and_is_deterministic() {
        let prob = problem(10, 2);
        let zero = MapTensor::Dense(vec![0.0; prob.dim()]);
        let opts = AlsOptions { seed: 4, ..AlsOptions::default() };
        let a = als_rank_one(&prob, &zero, 0, &opts).unwrap();
        let b = als_rank_one(&prob, &zero, 0, &opts).unwrap();
        assert_eq!(a, b);
        for w in a.decrements.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs());
        }
        assert!(a.decrements[0] < 0.0);
    }

    #[test]
    fn greedy_is_monotone_and_approaches_full_galerkin() {
        let prob = problem(16, 3);
        let (full, _) = prob.solve(1e-12, 2000).unwrap();
        let opts = GreedyOptions { r_max: rank_bound(&prob), tol: 1e-10, ..GreedyOptions::default() };
        let (_, state) = greedy_solve(&prob, &opts, Some(&full)).unwrap();
        for w in state.j_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs());
        }
        let full_norm = prob.energy_norms(&prob.map_at_nodes(&full)).unwrap().c;
        let last = *state.error_history.last().unwrap();
        assert!(last <= 0.01 * full_norm, "{last} vs {full_norm}");
        let j_full = j_eval(&prob, full.tensor());
        assert!(state.j_history.iter().all(|j| j_full <= *j + 1e-12 * j.abs()));
    }
}
