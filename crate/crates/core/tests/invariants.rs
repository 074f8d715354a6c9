use proptest::prelude::*;

use spdfield_core::chaos::ChaosBasis;
use spdfield_core::fem::{FemSpace, Load};
use spdfield_core::linalg::{HouseholderQr, Matrix};
use spdfield_core::matalg::{sym_exp, sym_log, sym_vec, sym_vec_weights, vec_sym, SymMatrix};
use spdfield_core::mesh::Mesh;
use spdfield_core::repclass::{rep_forward, rep_inverse, NormalizationField, RepKind, SquashFunction};
use spdfield_core::stiefel::{map_full, map_reduced, pack_s, tangent_dim, unpack_s, StiefelChart, StiefelPoint};

fn sym(n: usize, scale: f64) -> impl Strategy<Value = SymMatrix> {
    prop::collection::vec(-1.0f64..1.0, n * (n + 1) / 2).prop_map(move |v| {
        let mut it = v.into_iter();
        SymMatrix::from_upper(n, |_, _| scale * it.next().unwrap())
    })
}

fn point(n: usize, m: usize) -> impl Strategy<Value = StiefelPoint> {
    prop::collection::vec(-1.0f64..1.0, n * m).prop_filter_map("rank deficient draw", move |v| {
        let g = Matrix::from_row_major(n, m, v).ok()?;
        let qr = HouseholderQr::new(&g);
        (0..m).all(|i| qr.r()[(i, i)].abs() > 1e-3).then(|| StiefelPoint::new(qr.thin_q()).ok()).flatten()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn exp_and_log_invert_each_other(g in sym(3, 3.0)) {
        let k = sym_exp(&g).unwrap();
        prop_assert!(k.min_eigenvalue().unwrap() > 0.0);
        prop_assert!(sym_log(&k).unwrap().max_abs_diff(&g) <= 1e-9 * g.frobenius_norm().max(1.0));
    }

    #[test]
    fn exp_of_a_sum_of_commuting_terms(g in sym(4, 1.0), s in -2.0f64..2.0) {
        // g and s·I commute, so exp(g + sI) = e^s exp(g)
        let shifted = sym_exp(&g.add(&SymMatrix::identity(4).scale(s))).unwrap();
        let scaled = sym_exp(&g).unwrap().scale(s.exp());
        prop_assert!(shifted.max_abs_diff(&scaled) <= 1e-12 * scaled.frobenius_norm());
    }

    #[test]
    fn packed_vectors_preserve_the_frobenius_product(a in sym(3, 2.0), b in sym(3, 2.0)) {
        let (va, vb) = (sym_vec(&a), sym_vec(&b));
        let dot: f64 = va.iter().zip(&vb).zip(sym_vec_weights(3)).map(|((x, y), w)| w * x * y).sum();
        prop_assert!((dot - a.frobenius_dot(&b)).abs() <= 1e-12 * (1.0 + a.frobenius_norm() * b.frobenius_norm()));
        prop_assert_eq!(vec_sym(3, &va).unwrap(), a);
    }

    #[test]
    fn representations_round_trip_and_respect_the_lower_bound(g in sym(2, 1.5), square in any::<bool>()) {
        let kind = if square {
            RepKind::Square(SquashFunction::apm(2, 0.6).unwrap())
        } else {
            RepKind::Exponential
        };
        let k0 = rep_forward(&kind, &g).unwrap();
        prop_assert!(rep_inverse(&kind, &k0).unwrap().max_abs_diff(&g) <= 1e-8 * g.frobenius_norm().max(1.0));
        let lower = SymMatrix::from_upper(2, |i, j| if i == j { 1.5 } else { 0.4 });
        let norm = NormalizationField::constant(&lower, 1, 1e-2).unwrap();
        let k = norm.normalize(&k0, 0);
        prop_assert!(k.min_eigenvalue().unwrap() >= norm.k_eps() - 1e-12);
        prop_assert!(norm.denormalize(&k, 0).unwrap().max_abs_diff(&k0) <= 1e-9 * k0.frobenius_norm());
    }

    #[test]
    fn stiefel_maps_agree_and_stay_on_the_manifold(
        a in point(9, 3),
        z in prop::collection::vec(-1.5f64..1.5, tangent_dim(9, 3)),
        t in 0.2f64..2.0,
    ) {
        let full = map_full(&a, &z, t).unwrap();
        let reduced = map_reduced(&a, &z, t).unwrap();
        prop_assert!(full.residual() <= 1e-10 && reduced.residual() <= 1e-10);
        prop_assert!(full.matrix().max_abs_diff(reduced.matrix()) <= 1e-9);
        let origin = StiefelChart::new(a.clone(), t).unwrap().map(&vec![0.0; z.len()]).unwrap();
        prop_assert!(origin.matrix().max_abs_diff(a.matrix()) <= 1e-12);
    }

    #[test]
    fn tangent_packing_round_trips(m in 1usize..4, extra in 0usize..5, seed in 0u64..1000) {
        let n = m + extra;
        let z: Vec<f64> = (0..tangent_dim(n, m)).map(|k| ((k as u64 * 7919 + seed) % 101) as f64 / 50.0 - 1.0).collect();
        let (a, b) = pack_s(&z, m, n).unwrap();
        prop_assert!(a.add(&a.transpose()).frobenius_norm() == 0.0);
        prop_assert_eq!(unpack_s(&a, &b), z);
    }

    #[test]
    fn constant_coefficients_scale_the_solution(c in 0.1f64..10.0, cells in 4usize..30) {
        let fem = FemSpace::new(Mesh::interval(cells, 0.0, 1.0).unwrap()).unwrap();
        let unit = fem.solve_det(&fem.identity_coefficients(), &Load::Constant(1.0)).unwrap();
        let coeff: Vec<f64> = fem.identity_coefficients().iter().map(|v| c * v).collect();
        let scaled = fem.solve_det(&coeff, &Load::Constant(1.0)).unwrap();
        for (u, v) in unit.iter().zip(&scaled) {
            prop_assert!((u - c * v).abs() <= 1e-12 * u.abs().max(1e-12));
        }
    }
}

#[test]
fn chaos_basis_is_orthonormal_under_its_exact_rule() {
    for (dim, degree) in [(1, 5), (2, 3), (3, 2)] {
        let basis = ChaosBasis::hermite(dim, degree, true);
        let (points, weights) = basis.exact_rule().unwrap();
        let n = basis.len();
        let mut gram = vec![0.0; n * n];
        for (x, w) in points.iter().zip(&weights) {
            let psi = basis.eval(x);
            for i in 0..n {
                for j in 0..n {
                    gram[i * n + j] += w * psi[i] * psi[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((gram[i * n + j] - target).abs() < 1e-12, "({dim}, {degree}) entry ({i}, {j})");
            }
        }
    }
}

#[test]
fn one_dimensional_poisson_matches_the_parabola_at_nodes() {
    // P1 elements reproduce the exact solution x(1 − x)/2 at the nodes
    let fem = FemSpace::new(Mesh::interval(17, 0.0, 1.0).unwrap()).unwrap();
    let u = fem.to_nodal(&fem.solve_det(&fem.identity_coefficients(), &Load::Constant(1.0)).unwrap());
    for (k, v) in u.iter().enumerate() {
        let x = fem.mesh().node(k)[0];
        assert!((v - x * (1.0 - x) / 2.0).abs() < 1e-13);
    }
}
