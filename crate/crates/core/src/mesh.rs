//! Simplicial meshes in one and two space dimensions.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Interval partition (`dim = 1`) or conforming triangulation (`dim = 2`).
///
/// Cells are stored as `dim + 1` node indices; triangles are kept
/// counter-clockwise. Boundary flags mark the nodes carrying the homogeneous
/// Dirichlet condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    dim: usize,
    coords: Vec<f64>,
    cells: Vec<usize>,
    boundary: Vec<bool>,
}

impl Mesh {
    /// Validates and builds a mesh. When `boundary` is `None` the boundary is
    /// derived from the topology (facets owned by a single cell).
    pub fn new(dim: usize, coords: Vec<f64>, mut cells: Vec<usize>, boundary: Option<Vec<bool>>) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidInput(format!("mesh dimension {dim} (only 1 and 2 are supported)")));
        }
        if !coords.len().is_multiple_of(dim) || coords.is_empty() {
            return Err(Error::Dimension("coordinate array length".into()));
        }
        let n_nodes = coords.len() / dim;
        let per = dim + 1;
        if !cells.len().is_multiple_of(per) || cells.is_empty() {
            return Err(Error::Dimension("cell array length".into()));
        }
        if let Some(&bad) = cells.iter().find(|&&c| c >= n_nodes) {
            return Err(Error::InvalidInput(format!("cell refers to node {bad} of {n_nodes}")));
        }
        if !coords.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidInput("non-finite node coordinate".into()));
        }
        let mut mesh = Self { dim, coords, cells: Vec::new(), boundary: Vec::new() };
        for e in 0..cells.len() / per {
            let c = &mut cells[e * per..(e + 1) * per];
            let signed = mesh.signed_measure(c);
            if signed.abs() <= 1e-14 * libm::pow(mesh.extent(), dim as f64) {
                return Err(Error::InvalidInput(format!("cell {e} has zero measure")));
            }
            if signed < 0.0 {
                c.swap(0, 1);
            }
        }
        mesh.cells = cells;
        mesh.boundary = match boundary {
            Some(b) if b.len() == n_nodes => b,
            Some(b) => return Err(Error::Dimension(format!("{} boundary flags for {n_nodes} nodes", b.len()))),
            None => mesh.topological_boundary(),
        };
        Ok(mesh)
    }

    /// Uniform partition of `[a, b]` into `n_cells` intervals.
    pub fn interval(n_cells: usize, a: f64, b: f64) -> Result<Self> {
        if n_cells == 0 || !(b > a) {
            return Err(Error::InvalidInput("interval mesh needs n_cells ≥ 1 and b > a".into()));
        }
        let h = (b - a) / n_cells as f64;
        let coords = (0..=n_cells).map(|i| if i == n_cells { b } else { a + h * i as f64 }).collect();
        let cells = (0..n_cells).flat_map(|e| [e, e + 1]).collect();
        Self::new(1, coords, cells, None)
    }

    /// Structured triangulation of `[x0, x1] × [y0, y1]` with `nx × ny`
    /// squares, each cut along its diagonal.
    pub fn rectangle(nx: usize, ny: usize, x: (f64, f64), y: (f64, f64)) -> Result<Self> {
        if nx == 0 || ny == 0 || !(x.1 > x.0) || !(y.1 > y.0) {
            return Err(Error::InvalidInput("rectangle mesh needs positive sizes".into()));
        }
        let mut coords = Vec::with_capacity(2 * (nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                coords.push(x.0 + (x.1 - x.0) * i as f64 / nx as f64);
                coords.push(y.0 + (y.1 - y.0) * j as f64 / ny as f64);
            }
        }
        let id = |i: usize, j: usize| j * (nx + 1) + i;
        let mut cells = Vec::with_capacity(6 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                cells.extend_from_slice(&[id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                cells.extend_from_slice(&[id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        Self::new(2, coords, cells, None)
    }

    fn extent(&self) -> f64 {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in 0..self.n_nodes() {
            for (d, &c) in self.node(p).iter().enumerate() {
                lo[d] = lo[d].min(c);
                hi[d] = hi[d].max(c);
            }
        }
        (0..self.dim).map(|d| hi[d] - lo[d]).fold(0.0, f64::max)
    }

    fn signed_measure(&self, c: &[usize]) -> f64 {
        if self.dim == 1 {
            self.node(c[1])[0] - self.node(c[0])[0]
        } else {
            let (a, b, d) = (self.node(c[0]), self.node(c[1]), self.node(c[2]));
            0.5 * ((b[0] - a[0]) * (d[1] - a[1]) - (d[0] - a[0]) * (b[1] - a[1]))
        }
    }

    fn topological_boundary(&self) -> Vec<bool> {
        let mut flags = vec![false; self.n_nodes()];
        if self.dim == 1 {
            let mut count = vec![0usize; self.n_nodes()];
            for &c in &self.cells {
                count[c] += 1;
            }
            for (f, &k) in flags.iter_mut().zip(&count) {
                *f = k == 1;
            }
        } else {
            let mut edges: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for e in 0..self.n_cells() {
                let c = self.cell(e);
                for (a, b) in [(c[0], c[1]), (c[1], c[2]), (c[2], c[0])] {
                    *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                }
            }
            for ((a, b), k) in edges {
                if k == 1 {
                    flags[a] = true;
                    flags[b] = true;
                }
            }
        }
        flags
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len() / (self.dim + 1)
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn cell(&self, e: usize) -> &[usize] {
        let per = self.dim + 1;
        &self.cells[e * per..(e + 1) * per]
    }

    pub fn is_boundary(&self, i: usize) -> bool {
        self.boundary[i]
    }

    pub fn boundary(&self) -> &[bool] {
        &self.boundary
    }

    /// Length or area of cell `e`.
    pub fn cell_measure(&self, e: usize) -> f64 {
        self.signed_measure(self.cell(e)).abs()
    }

    pub fn centroid(&self, e: usize) -> Vec<f64> {
        let c = self.cell(e);
        let mut out = vec![0.0; self.dim];
        for &p in c {
            for (o, x) in out.iter_mut().zip(self.node(p)) {
                *o += x / c.len() as f64;
            }
        }
        out
    }

    /// Largest cell diameter.
    pub fn max_cell_size(&self) -> f64 {
        let mut h = 0.0f64;
        for e in 0..self.n_cells() {
            let c = self.cell(e);
            for a in 0..c.len() {
                for b in a + 1..c.len() {
                    let d: f64 = self.node(c[a]).iter().zip(self.node(c[b])).map(|(x, y)| (x - y) * (x - y)).sum();
                    h = h.max(libm::sqrt(d));
                }
            }
        }
        h
    }

    /// Lumped nodal quadrature weights: each cell hands `|e|/(dim+1)` to its
    /// vertices (the trapezoidal rule in 1D).
    pub fn node_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_nodes()];
        for e in 0..self.n_cells() {
            let share = self.cell_measure(e) / (self.dim + 1) as f64;
            for &p in self.cell(e) {
                w[p] += share;
            }
        }
        w
    }

    /// Barycentric coordinates of `x` in cell `e`.
    pub fn barycentric(&self, e: usize, x: &[f64]) -> Vec<f64> {
        let c = self.cell(e);
        if self.dim == 1 {
            let (a, b) = (self.node(c[0])[0], self.node(c[1])[0]);
            let t = (x[0] - a) / (b - a);
            vec![1.0 - t, t]
        } else {
            let (p0, p1, p2) = (self.node(c[0]), self.node(c[1]), self.node(c[2]));
            let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
            let l1 = ((x[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (x[1] - p0[1])) / det;
            let l2 = ((p1[0] - p0[0]) * (x[1] - p0[1]) - (x[0] - p0[0]) * (p1[1] - p0[1])) / det;
            vec![1.0 - l1 - l2, l1, l2]
        }
    }

    /// Cell containing `x` with its barycentric coordinates, if any.
    pub fn locate(&self, x: &[f64]) -> Option<(usize, Vec<f64>)> {
        if x.len() != self.dim {
            return None;
        }
        (0..self.n_cells()).find_map(|e| {
            let l = self.barycentric(e, x);
            l.iter().all(|&v| v >= -1e-12).then_some((e, l))
        })
    }

    /// Gradients of the barycentric (hat) functions on cell `e`, as
    /// `(dim + 1) × dim` row-major.
    pub fn hat_gradients(&self, e: usize) -> Vec<f64> {
        let c = self.cell(e);
        if self.dim == 1 {
            let h = self.node(c[1])[0] - self.node(c[0])[0];
            vec![-1.0 / h, 1.0 / h]
        } else {
            let (p0, p1, p2) = (self.node(c[0]), self.node(c[1]), self.node(c[2]));
            let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
            vec![
                (p1[1] - p2[1]) / det,
                (p2[0] - p1[0]) / det,
                (p2[1] - p0[1]) / det,
                (p0[0] - p2[0]) / det,
                (p0[1] - p1[1]) / det,
                (p1[0] - p0[0]) / det,
            ]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_mesh_basics() {
        let m = Mesh::interval(4, 0.0, 1.0).unwrap();
        assert_eq!(m.n_nodes(), 5);
        assert_eq!(m.n_cells(), 4);
        assert_eq!(m.boundary(), &[true, false, false, false, true]);
        let w = m.node_weights();
        assert_eq!(w, vec![0.125, 0.25, 0.25, 0.25, 0.125]);
        assert_eq!(m.locate(&[0.6]).unwrap().0, 2);
    }

    #[test]
    fn rectangle_mesh_basics() {
        let m = Mesh::rectangle(3, 2, (0.0, 1.5), (0.0, 1.0)).unwrap();
        assert_eq!(m.n_nodes(), 12);
        assert_eq!(m.n_cells(), 12);
        let total: f64 = (0..m.n_cells()).map(|e| m.cell_measure(e)).sum();
        assert!((total - 1.5).abs() < 1e-14);
        assert!((m.node_weights().iter().sum::<f64>() - 1.5).abs() < 1e-14);
        let interior: Vec<usize> = (0..12).filter(|&i| !m.is_boundary(i)).collect();
        assert_eq!(interior, vec![5, 6]);
        let (e, l) = m.locate(&[0.7, 0.3]).unwrap();
        let back: f64 = m.cell(e).iter().zip(&l).map(|(&p, w)| w * m.node(p)[0]).sum();
        assert!((back - 0.7).abs() < 1e-14);
    }

    #[test]
    fn hat_gradients_sum_to_zero() {
        let m = Mesh::rectangle(2, 2, (0.0, 1.0), (0.0, 1.0)).unwrap();
        for e in 0..m.n_cells() {
            let g = m.hat_gradients(e);
            assert!((g[0] + g[2] + g[4]).abs() < 1e-13);
            assert!((g[1] + g[3] + g[5]).abs() < 1e-13);
        }
    }

    #[test]
    fn rejects_degenerate_cells() {
        let err = Mesh::new(2, vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0], vec![0, 1, 2], None);
        assert!(err.is_err());
        let flipped = Mesh::new(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![0, 2, 1], None).unwrap();
        assert!((flipped.cell_measure(0) - 0.5).abs() < 1e-15);
    }
}
