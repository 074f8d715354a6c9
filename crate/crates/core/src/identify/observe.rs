//! Observation operators and a counted per-sample forward solver.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::fem::{FemSpace, Load};
use crate::field::SymField;
use crate::rng::{normal, StreamRng};

/// Linear functionals `ℬ` of the FEM solution plus an additive Gaussian
/// noise model with one standard deviation per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    rows: Vec<Vec<(usize, f64)>>,
    noise_std: Vec<f64>,
}

impl Observation {
    pub fn new(rows: Vec<Vec<(usize, f64)>>, noise_std: Vec<f64>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("observation needs at least one channel".into()));
        }
        if noise_std.len() != rows.len() || noise_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidInput(format!("{} noise levels for {} channels", noise_std.len(), rows.len())));
        }
        Ok(Self { rows, noise_std })
    }

    /// Point values `u(x_i)`.
    pub fn point_values(fem: &FemSpace, points: &[Vec<f64>], noise_std: f64) -> Result<Self> {
        let rows = points.iter().map(|x| fem.point_functional(x)).collect::<Result<Vec<_>>>()?;
        Self::new(rows, vec![noise_std; points.len()])
    }

    /// Mass-weighted averages of the nodal values within `radius` of each center.
    pub fn local_averages(fem: &FemSpace, centers: &[Vec<f64>], radius: f64, noise_std: f64) -> Result<Self> {
        let mesh = fem.mesh();
        let weights = mesh.node_weights();
        let mut rows = Vec::with_capacity(centers.len());
        for c in centers {
            let mut total = 0.0;
            let mut row = Vec::new();
            for p in 0..mesh.n_nodes() {
                let d2: f64 = mesh.node(p).iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 <= radius * radius {
                    total += weights[p];
                    if let Some(i) = fem.dof_of_node(p) {
                        row.push((i, weights[p]));
                    }
                }
            }
            if !(total > 0.0) {
                return Err(Error::Domain(format!("no mesh node within {radius} of {c:?}")));
            }
            row.iter_mut().for_each(|(_, w)| *w /= total);
            rows.push(row);
        }
        Self::new(rows, vec![noise_std; centers.len()])
    }

    pub fn m_obs(&self) -> usize {
        self.rows.len()
    }

    pub fn noise_std(&self) -> &[f64] {
        &self.noise_std
    }

    pub fn with_noise(&self, noise_std: Vec<f64>) -> Result<Self> {
        Self::new(self.rows.clone(), noise_std)
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|(i, w)| w * u[*i]).sum()).collect()
    }

    /// Adds the noise model to noise-free observations.
    pub fn perturb(&self, clean: &mut [f64], rng: &mut StreamRng) {
        for (v, s) in clean.iter_mut().zip(&self.noise_std) {
            *v += s * normal(rng);
        }
    }
}

/// Direct FEM solves followed by `ℬ`, with a solve counter.
#[derive(Debug)]
pub struct DirectForward {
    fem: FemSpace,
    load: Vec<f64>,
    obs: Observation,
    solves: AtomicUsize,
}

impl DirectForward {
    pub fn new(fem: FemSpace, load: &Load, obs: Observation) -> Result<Self> {
        let load = fem.load_vector(load)?;
        Ok(Self { fem, load, obs, solves: AtomicUsize::new(0) })
    }

    pub fn fem(&self) -> &FemSpace {
        &self.fem
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn solves(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    /// Solution for packed per-cell coefficients.
    pub fn solve_cells(&self, coeff: &[f64]) -> Result<Vec<f64>> {
        self.solves.fetch_add(1, Ordering::Relaxed);
        let values = self.fem.assemble(coeff)?;
        self.fem.solve_with(&values, &self.load)
    }

    pub fn observe_cells(&self, coeff: &[f64]) -> Result<Vec<f64>> {
        Ok(self.obs.apply(&self.solve_cells(coeff)?))
    }

    /// Observation for a nodal coefficient field (averaged onto cells).
    pub fn observe_nodal(&self, k: &SymField) -> Result<Vec<f64>> {
        self.observe_cells(k.to_centroids(self.fem.mesh())?.as_slice())
    }
}
