//! Symmetric-matrix-valued fields sampled at a set of points (mesh nodes or
//! cell centroids), stored packed with `n(n+1)/2` channels per point.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matalg::{sym_dim, sym_vec, sym_vec_weights, vec_sym, SymMatrix};
use crate::mesh::Mesh;

#[derive(Debug, Clone, PartialEq)]
pub struct SymField {
    n: usize,
    points: usize,
    data: Vec<f64>,
}

impl SymField {
    pub fn zeros(n: usize, points: usize) -> Self {
        Self { n, points, data: vec![0.0; points * sym_dim(n)] }
    }

    pub fn constant(points: usize, value: &SymMatrix) -> Self {
        let w = sym_vec(value);
        let mut data = Vec::with_capacity(points * w.len());
        for _ in 0..points {
            data.extend_from_slice(&w);
        }
        Self { n: value.n(), points, data }
    }

    pub fn from_matrices(values: &[SymMatrix]) -> Result<Self> {
        let n = values.first().map_or(0, SymMatrix::n);
        let mut data = Vec::with_capacity(values.len() * sym_dim(n));
        for v in values {
            if v.n() != n {
                return Err(Error::Dimension("mixed matrix sizes in a field".into()));
            }
            data.extend_from_slice(&sym_vec(v));
        }
        Ok(Self { n, points: values.len(), data })
    }

    pub fn from_packed(n: usize, data: Vec<f64>) -> Result<Self> {
        let nw = sym_dim(n);
        if nw == 0 || !data.len().is_multiple_of(nw) {
            return Err(Error::Dimension(format!("{} packed values for n = {n}", data.len())));
        }
        Ok(Self { n, points: data.len() / nw, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_w(&self) -> usize {
        sym_dim(self.n)
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn packed(&self, p: usize) -> &[f64] {
        let nw = self.n_w();
        &self.data[p * nw..(p + 1) * nw]
    }

    pub fn packed_mut(&mut self, p: usize) -> &mut [f64] {
        let nw = self.n_w();
        &mut self.data[p * nw..(p + 1) * nw]
    }

    pub fn at(&self, p: usize) -> SymMatrix {
        vec_sym(self.n, self.packed(p)).expect("packed width matches n")
    }

    pub fn set(&mut self, p: usize, value: &SymMatrix) {
        assert_eq!(value.n(), self.n);
        self.packed_mut(p).copy_from_slice(&sym_vec(value));
    }

    /// `self ← self + alpha·other`
    pub fn axpy(&mut self, alpha: f64, other: &SymField) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn sub(&self, other: &SymField) -> SymField {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// Frobenius norm of the matrix at point `p`.
    pub fn frobenius_at(&self, p: usize) -> f64 {
        let weights = sym_vec_weights(self.n);
        libm::sqrt(self.packed(p).iter().zip(&weights).map(|(v, w)| w * v * v).sum())
    }

    /// `max_p ‖F(p)‖_F`, the discrete sup norm.
    pub fn sup_norm(&self) -> f64 {
        (0..self.points).map(|p| self.frobenius_at(p)).fold(0.0, f64::max)
    }

    /// `Σ_p q_p tr(A(p)ᵀ B(p))`, the discrete counterpart of `∫ tr(AᵀB) dx`.
    pub fn inner(&self, other: &SymField, quad: &[f64]) -> f64 {
        assert_eq!(self.points, other.points);
        assert_eq!(quad.len(), self.points);
        let weights = sym_vec_weights(self.n);
        let nw = weights.len();
        let mut total = 0.0;
        for (p, &q) in quad.iter().enumerate() {
            let a = &self.data[p * nw..(p + 1) * nw];
            let b = &other.data[p * nw..(p + 1) * nw];
            total += q * a.iter().zip(b).zip(&weights).map(|((x, y), w)| w * x * y).sum::<f64>();
        }
        total
    }

    /// Averages nodal values over each cell, giving a field on cell centroids.
    pub fn to_centroids(&self, mesh: &Mesh) -> Result<SymField> {
        if mesh.n_nodes() != self.points {
            return Err(Error::Dimension(format!("field has {} points, mesh {} nodes", self.points, mesh.n_nodes())));
        }
        let nw = self.n_w();
        let mut out = SymField::zeros(self.n, mesh.n_cells());
        for e in 0..mesh.n_cells() {
            let cell = mesh.cell(e);
            let share = 1.0 / cell.len() as f64;
            let dst = &mut out.data[e * nw..(e + 1) * nw];
            for &p in cell {
                for (d, s) in dst.iter_mut().zip(&self.data[p * nw..(p + 1) * nw]) {
                    *d += share * s;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frobenius_weights_off_diagonals_twice() {
        let g = SymMatrix::from_rows(2, &[1.0, 2.0, 2.0, 3.0]).unwrap();
        let f = SymField::constant(3, &g);
        assert!((f.frobenius_at(1) - g.frobenius_norm()).abs() < 1e-15);
        let q = [0.25, 0.5, 0.25];
        assert!((f.inner(&f, &q) - g.frobenius_dot(&g)).abs() < 1e-14);
        assert_eq!(f.at(2), g);
    }

    #[test]
    fn centroid_average() {
        let mesh = Mesh::interval(2, 0.0, 1.0).unwrap();
        let f = SymField::from_matrices(&[SymMatrix::identity(1), SymMatrix::identity(1).scale(3.0), SymMatrix::identity(1).scale(5.0)])
            .unwrap();
        let c = f.to_centroids(&mesh).unwrap();
        assert_eq!(c.as_slice(), &[2.0, 4.0]);
    }
}
