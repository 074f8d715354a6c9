//! P1 finite elements for `−div(K ∇u) = f` with homogeneous Dirichlet
//! conditions. The coefficient is one `d × d` symmetric matrix per cell.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{BandCholesky, CsrMatrix};
use crate::matalg::{sym_dim, sym_index};
use crate::mesh::Mesh;

/// Right-hand side of the boundary value problem.
#[derive(Debug, Clone, PartialEq)]
pub enum Load {
    Constant(f64),
    /// Nodal values of `f`, integrated with the consistent mass matrix.
    Nodal(Vec<f64>),
    /// Point loads `(x, magnitude)`.
    Points(Vec<(Vec<f64>, f64)>),
}

const NONE: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct FemSpace {
    mesh: Mesh,
    dof_of_node: Vec<usize>,
    node_of_dof: Vec<usize>,
    pattern: CsrMatrix,
    /// `n_cells × nloc × nloc` CSR positions (`NONE` for boundary couplings).
    cell_pos: Vec<usize>,
    /// `n_cells × n_w × nloc × nloc` local stiffness per unit coefficient channel.
    cell_basis: Vec<f64>,
    laplace: Vec<f64>,
    laplace_chol: BandCholesky,
}

impl FemSpace {
    pub fn new(mesh: Mesh) -> Result<Self> {
        let d = mesh.dim();
        let nloc = d + 1;
        let nw = sym_dim(d);
        let mut dof_of_node = vec![NONE; mesh.n_nodes()];
        let mut node_of_dof = Vec::new();
        for (p, slot) in dof_of_node.iter_mut().enumerate() {
            if !mesh.is_boundary(p) {
                *slot = node_of_dof.len();
                node_of_dof.push(p);
            }
        }
        let n = node_of_dof.len();
        if n == 0 {
            return Err(Error::InvalidInput("mesh has no interior nodes".into()));
        }
        let mut triplets = Vec::new();
        for e in 0..mesh.n_cells() {
            for &a in mesh.cell(e) {
                for &b in mesh.cell(e) {
                    let (da, db) = (dof_of_node[a], dof_of_node[b]);
                    if da != NONE && db != NONE {
                        triplets.push((da, db, 0.0));
                    }
                }
            }
        }
        let pattern = CsrMatrix::from_triplets(n, n, &triplets);
        let mut cell_pos = vec![NONE; mesh.n_cells() * nloc * nloc];
        let mut cell_basis = vec![0.0; mesh.n_cells() * nw * nloc * nloc];
        for e in 0..mesh.n_cells() {
            let cell = mesh.cell(e);
            for a in 0..nloc {
                for b in 0..nloc {
                    let (da, db) = (dof_of_node[cell[a]], dof_of_node[cell[b]]);
                    if da != NONE && db != NONE {
                        cell_pos[(e * nloc + a) * nloc + b] = pattern.position(da, db).expect("pattern covers cell couplings");
                    }
                }
            }
            let grads = mesh.hat_gradients(e);
            let vol = mesh.cell_measure(e);
            for j in 0..d {
                for i in 0..=j {
                    let k = sym_index(i, j);
                    for a in 0..nloc {
                        for b in 0..nloc {
                            let (ga, gb) = (&grads[a * d..(a + 1) * d], &grads[b * d..(b + 1) * d]);
                            let v = if i == j { ga[i] * gb[i] } else { ga[i] * gb[j] + ga[j] * gb[i] };
                            cell_basis[((e * nw + k) * nloc + a) * nloc + b] = vol * v;
                        }
                    }
                }
            }
        }
        let mut space = Self {
            mesh,
            dof_of_node,
            node_of_dof,
            pattern,
            cell_pos,
            cell_basis,
            laplace: Vec::new(),
            laplace_chol: BandCholesky::factor(&CsrMatrix::from_triplets(1, 1, &[(0, 0, 1.0)]), &[1.0])?,
        };
        let unit = space.identity_coefficients();
        space.laplace = space.assemble(&unit)?;
        space.laplace_chol = BandCholesky::factor(&space.pattern, &space.laplace)?;
        Ok(space)
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn n_dofs(&self) -> usize {
        self.node_of_dof.len()
    }

    /// Packed width of one cell coefficient, `d(d+1)/2`.
    pub fn n_w(&self) -> usize {
        sym_dim(self.mesh.dim())
    }

    pub fn pattern(&self) -> &CsrMatrix {
        &self.pattern
    }

    pub fn node_of_dof(&self, i: usize) -> usize {
        self.node_of_dof[i]
    }

    pub fn dof_of_node(&self, p: usize) -> Option<usize> {
        let d = self.dof_of_node[p];
        (d != NONE).then_some(d)
    }

    /// Packed identity coefficient on every cell.
    pub fn identity_coefficients(&self) -> Vec<f64> {
        let d = self.mesh.dim();
        let nw = self.n_w();
        let mut c = vec![0.0; self.mesh.n_cells() * nw];
        for e in 0..self.mesh.n_cells() {
            for i in 0..d {
                c[e * nw + sym_index(i, i)] = 1.0;
            }
        }
        c
    }

    /// CSR values of the stiffness matrix for packed per-cell coefficients.
    pub fn assemble_into(&self, coeff: &[f64], values: &mut [f64]) -> Result<()> {
        let nw = self.n_w();
        let nloc = self.mesh.dim() + 1;
        if coeff.len() != self.mesh.n_cells() * nw {
            return Err(Error::Dimension(format!("{} coefficient values for {} cells", coeff.len(), self.mesh.n_cells())));
        }
        values.iter_mut().for_each(|v| *v = 0.0);
        let ll = nloc * nloc;
        for e in 0..self.mesh.n_cells() {
            let pos = &self.cell_pos[e * ll..(e + 1) * ll];
            for k in 0..nw {
                let c = coeff[e * nw + k];
                if c == 0.0 {
                    continue;
                }
                let basis = &self.cell_basis[(e * nw + k) * ll..(e * nw + k + 1) * ll];
                for (p, b) in pos.iter().zip(basis) {
                    if *p != NONE {
                        values[*p] += c * b;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn assemble(&self, coeff: &[f64]) -> Result<Vec<f64>> {
        let mut values = vec![0.0; self.pattern.nnz()];
        self.assemble_into(coeff, &mut values)?;
        Ok(values)
    }

    pub fn load_vector(&self, load: &Load) -> Result<Vec<f64>> {
        let mut b = vec![0.0; self.n_dofs()];
        let d = self.mesh.dim();
        let nloc = d + 1;
        match load {
            Load::Constant(f) => {
                for e in 0..self.mesh.n_cells() {
                    let share = f * self.mesh.cell_measure(e) / nloc as f64;
                    for &p in self.mesh.cell(e) {
                        if let Some(i) = self.dof_of_node(p) {
                            b[i] += share;
                        }
                    }
                }
            }
            Load::Nodal(values) => {
                if values.len() != self.mesh.n_nodes() {
                    return Err(Error::Dimension(format!("{} nodal load values for {} nodes", values.len(), self.mesh.n_nodes())));
                }
                // consistent mass: |e|/((d+1)(d+2))·(1 + δ_ab)
                for e in 0..self.mesh.n_cells() {
                    let scale = self.mesh.cell_measure(e) / ((nloc * (nloc + 1)) as f64);
                    let cell = self.mesh.cell(e);
                    for &a in cell {
                        if let Some(i) = self.dof_of_node(a) {
                            for &q in cell {
                                let m = if a == q { 2.0 } else { 1.0 };
                                b[i] += scale * m * values[q];
                            }
                        }
                    }
                }
            }
            Load::Points(points) => {
                for (x, mag) in points {
                    for (i, w) in self.point_functional(x)? {
                        b[i] += mag * w;
                    }
                }
            }
        }
        Ok(b)
    }

    /// Direct solve of the stiffness system with CSR `values`.
    pub fn solve_with(&self, values: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
        let chol = BandCholesky::factor(&self.pattern, values)
            .map_err(|e| Error::Invariant(format!("stiffness matrix is not positive definite: {e}")))?;
        Ok(chol.solve(rhs))
    }

    /// Deterministic solve for packed per-cell coefficients.
    pub fn solve_det(&self, coeff: &[f64], load: &Load) -> Result<Vec<f64>> {
        let values = self.assemble(coeff)?;
        let rhs = self.load_vector(load)?;
        self.solve_with(&values, &rhs)
    }

    pub fn laplace_values(&self) -> &[f64] {
        &self.laplace
    }

    /// `‖∇u‖_{L²}`
    pub fn h1_norm(&self, u: &[f64]) -> f64 {
        libm::sqrt(self.pattern.quadratic_form_with(&self.laplace, u).max(0.0))
    }

    /// Discrete dual norm `sup_v ⟨b, v⟩/‖∇v‖ = (bᵀ K_I⁻¹ b)^{1/2}`.
    pub fn dual_norm(&self, b: &[f64]) -> f64 {
        let x = self.laplace_chol.solve(b);
        libm::sqrt(crate::linalg::dot(b, &x).max(0.0))
    }

    /// Nodal values including the zero boundary values.
    pub fn to_nodal(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.mesh.n_nodes()];
        for (i, &p) in self.node_of_dof.iter().enumerate() {
            out[p] = u[i];
        }
        out
    }

    /// Weights `(dof, φ_dof(x))` of point evaluation at `x`.
    pub fn point_functional(&self, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        let (e, lambda) = self.mesh.locate(x).ok_or_else(|| Error::Domain(format!("point {x:?} lies outside the mesh")))?;
        Ok(self.mesh.cell(e).iter().zip(lambda).filter_map(|(&p, l)| self.dof_of_node(p).map(|i| (i, l))).collect())
    }

    pub fn evaluate(&self, u: &[f64], x: &[f64]) -> Result<f64> {
        Ok(self.point_functional(x)?.iter().map(|(i, w)| w * u[*i]).sum())
    }
}
