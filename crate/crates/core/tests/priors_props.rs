mod common;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ricefield::design::*;
use ricefield::priors::*;

fn rotation() -> impl Strategy<Value = nalgebra::Matrix3<f64>> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("nonzero", |(a, b, c, d)| a * a + b * b + c * c + d * d > 1e-3)
        .prop_map(|(a, b, c, d)| rotation_from_quaternion([a, b, c, d]))
}

/// Valid 4th-order precisions via the positive (alpha, beta, delta) parameters.
fn iso4() -> impl Strategy<Value = IsoPrecision4> {
    (0.05f64..3.0, 0.05f64..3.0, 0.05f64..3.0)
        .prop_map(|(a, b, d)| IsoPrecision4::from_alpha_beta_delta(a, b, d).unwrap())
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn omega2_positive_near_boundary(eta in 0.01f64..5.0, eps in 1e-9f64..1.0) {
        let p = IsoPrecision2::new(eta, -eta / 3.0 + eps * eta).unwrap();
        let m = omega_2nd(&p).unwrap();
        let dm = DMatrix::from_iterator(6, 6, m.iter().cloned());
        prop_assert!(min_eig(&dm) > 0.0);
        let det = dm.determinant();
        let closed = 8.0 * eta.powi(5) * p.delta();
        prop_assert!((det - closed).abs() <= 1e-9 * closed);
    }

    #[test]
    fn omega4_positive(p in iso4()) {
        prop_assert!(min_eig(&omega_4th(&p).unwrap()) > 0.0);
    }

    #[test]
    fn quadratic_form_equals_trace_form_2nd(c in prop::collection::vec(-2.0f64..2.0, 6), eta in 0.1f64..3.0, l in -0.03f64..2.0) {
        let p = IsoPrecision2::new(eta, l).unwrap();
        let om = omega_2nd(&p).unwrap();
        let x = nalgebra::Vector6::from_column_slice(&c);
        let q = (x.transpose() * om * x)[(0, 0)];
        let t = trace_form_2nd(&Tensor2::from_slice(&c), &p);
        prop_assert!((q - t).abs() <= 1e-12 * (1.0 + t.abs()));
    }

    #[test]
    fn quadratic_form_equals_trace_form_4th(c in prop::collection::vec(-2.0f64..2.0, 15), p in iso4()) {
        let om = omega_4th(&p).unwrap();
        let x = DVector::from_column_slice(&c);
        let q = (x.transpose() * om * &x)[(0, 0)];
        let t = trace_form_4th(&Tensor4::from_slice(&c), &p);
        prop_assert!((q - t).abs() <= 1e-11 * (1.0 + t.abs()));
    }

    #[test]
    fn isotropic_density_rotation_invariant(c in prop::collection::vec(-2.0f64..2.0, 15), p in iso4(), rot in rotation()) {
        let spec = ModelSpec::tensor4();
        let h = Hyper::Iso4(p);
        let d = Tensor4::from_slice(&c);
        let a = iso_log_density(&spec, &d.0, &h).unwrap();
        let b = iso_log_density(&spec, &d.rotate(&rot).0, &h).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        prop_assert!((g_invariant(&d) - g_invariant(&d.rotate(&rot))).abs() <= 1e-10 * g_invariant(&d).abs().max(1.0));
    }

    #[test]
    fn spectrum_rates_nonnegative(c in prop::collection::vec(-2.0f64..2.0, 6)) {
        let m = Tensor2::from_slice(&c).matrix();
        prop_assert!(0.5 * (m * m).trace() - m.trace().powi(2) / 6.0 >= -1e-12);
    }

    #[test]
    fn field_energy_is_shift_and_rotation_invariant(seed in any::<u64>(), rot in rotation(), shift in prop::collection::vec(-1.0f64..1.0, 7)) {
        let spec = ModelSpec::tensor2();
        let graph = VoxelGraph::full([3, 2, 2]);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..graph.len())
            .map(|_| (0..7).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect())
            .collect();
        let hyper = Hyper::Iso2(IsoPrecision2::new(0.8, 0.1).unwrap());
        let om = field_omega(&hyper, &spec, 0.0).unwrap();
        let e = field_prior_energy(&ParameterField::from_rows(&rows).unwrap(), &graph, &om).unwrap();
        let shifted: Vec<Vec<f64>> = rows.iter().map(|row| row.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let es = field_prior_energy(&ParameterField::from_rows(&shifted).unwrap(), &graph, &om).unwrap();
        let rotated: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| std::iter::once(row[0]).chain(Tensor2::from_slice(&row[1..]).rotate(&rot).0).collect())
            .collect();
        let er = field_prior_energy(&ParameterField::from_rows(&rotated).unwrap(), &graph, &om).unwrap();
        prop_assert!((e - es).abs() <= 1e-10 * e);
        prop_assert!((e - er).abs() <= 1e-10 * e);
        // Trace form, summed edge by edge.
        let p = IsoPrecision2::new(0.8, 0.1).unwrap();
        let t: f64 = graph.edges.iter().map(|&(v, w)| {
            let d: Vec<f64> = rows[v][1..].iter().zip(&rows[w][1..]).map(|(a, b)| a - b).collect();
            0.5 * trace_form_2nd(&Tensor2::from_slice(&d), &p)
        }).sum();
        prop_assert!((e - t).abs() <= 1e-12 * e.max(1.0));
    }

    #[test]
    fn spectrum_correspondence_closes(a in prop::collection::vec(0.2f64..3.0, 3)) {
        let tspec = ModelSpec::tensor4();
        let s = PowerSpectrum::new(a.clone(), 0.0).unwrap();
        let om = omega_for(&spectrum_to_precision(&s, &tspec).unwrap(), &tspec).unwrap();
        let b = tensor_sh_bijection(&tspec).unwrap();
        let diag = DVector::from_iterator(b.nrows(), sh_indices(2).iter().map(|(l, _)| a[l / 2]));
        let cov = b.transpose() * DMatrix::from_diagonal(&diag) * &b;
        prop_assert!((om * cov - DMatrix::identity(15, 15)).amax() < 1e-10);
    }
}

#[test]
fn graph_from_mask_edges() {
    let mask = vec![true, true, false, true];
    let g = VoxelGraph::from_mask([2, 2, 1], &mask).unwrap();
    assert_eq!(g.len(), 3);
    assert_eq!(g.edges, vec![(0, 1), (1, 2)]);
    assert!(VoxelGraph::from_mask([2, 2, 1], &[true]).is_err());
}

#[test]
fn invalid_precisions_rejected() {
    assert!(IsoPrecision2::new(0.0, 0.0).is_err());
    assert!(IsoPrecision2::new(1.0, -1.0 / 3.0).is_err());
    assert!(IsoPrecision4::from_alpha_beta_delta(1.0, -1.0, 1.0).is_err());
    assert!(PowerSpectrum::new(vec![1.0, 0.0], 0.0).is_err());
}
