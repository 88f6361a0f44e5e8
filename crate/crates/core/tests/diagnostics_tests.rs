use nalgebra::Vector3;
use proptest::prelude::*;
use ricefield::data_io::*;
use ricefield::design::*;
use ricefield::diagnostics::*;
use ricefield::priors::VoxelGraph;

#[test]
fn constant_map_exports_uniform_images() {
    let dir = tempfile::tempdir().unwrap();
    let graph = VoxelGraph::full([4, 3, 2]);
    let values = vec![0.7; graph.len()];
    let paths = export_maps(&values, &graph, MapKind::Fa, dir.path(), "run").unwrap();
    assert_eq!(paths.len(), 2);
    for p in &paths {
        let (w, h, px) = read_pgm16(p).unwrap();
        assert_eq!((w, h), (4, 3));
        assert!(px.iter().all(|&x| x == px[0]));
    }
}

#[test]
fn map_table_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let graph = VoxelGraph::full([3, 3, 1]);
    let values: Vec<f64> = (0..graph.len()).map(|v| (v as f64).sqrt() / 7.0).collect();
    export_maps(&values, &graph, MapKind::Md, dir.path(), "m").unwrap();
    let (coords, back) = read_map_table(&dir.path().join("m_md.tsv")).unwrap();
    assert_eq!(back, values);
    assert_eq!(coords, graph.coords);
    let (_, _, px) = read_pgm16(&dir.path().join("m_md_z0.pgm")).unwrap();
    assert_eq!(px[0], 0);
    assert_eq!(*px.iter().max().unwrap(), 65535);
}

#[test]
fn icosphere_sizes() {
    for (s, n) in [(0, 12), (1, 42), (2, 162), (3, 642)] {
        let m = SphereMesh::icosphere(s);
        assert_eq!(m.vertices.len(), n);
        assert!(m.vertices.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
    }
}

#[test]
fn isotropic_profile_is_constant() {
    let mesh = SphereMesh::icosphere(2);
    let vals = profile_values(&ModelSpec::tensor4(), &Tensor4::isotropic(1.3).0, &mesh).unwrap();
    assert!(vals.iter().all(|v| (v - 1.3).abs() < 1e-12));
}

#[test]
fn crossing_truth_has_two_perpendicular_maxima() {
    let mesh = SphereMesh::icosphere(3);
    let vals = profile_values(&ModelSpec::tensor4(), &crossing_tensor().0, &mesh).unwrap();
    let dirs = profile_maxima_directions(&vals, &mesh);
    assert!(dirs.len() >= 2);
    assert!(dirs.iter().any(|d| axis_angle_deg(d, &Vector3::x()) < 5.0));
    assert!(dirs.iter().any(|d| axis_angle_deg(d, &Vector3::y()) < 5.0));
}

#[test]
fn profiles_export_lines_per_voxel() {
    let dir = tempfile::tempdir().unwrap();
    let graph = VoxelGraph::full([2, 2, 1]);
    let spec = ModelSpec::tensor2();
    let theta: Vec<f64> = (0..4).flat_map(|_| [0.0, 1.7, 0.3, 0.3, 0.0, 0.0, 0.0]).collect();
    let mesh = SphereMesh::icosphere(1);
    let stem = dir.path().join("prof");
    export_profiles(&theta, 7, &spec, &graph, &mesh, &stem).unwrap();
    let text = std::fs::read_to_string(stem.with_extension("profiles")).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 4);
    let fields: Vec<&str> = rows[0].split(' ').collect();
    assert_eq!(fields.len(), 6 + 42);
    assert_eq!(&fields[3..6], &["255", "0", "0"]);
}

#[test]
fn dic_identity_and_errors() {
    let samples: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64 * 0.37).sin()]).collect();
    let r = compute_dic_generic(&samples, DicScope::Field, |t| t[0] * t[0] + 3.0).unwrap();
    assert_eq!(r.dic, 2.0 * r.mean_deviance - r.deviance_at_mean);
    assert_eq!(r.n_eff, r.mean_deviance - r.deviance_at_mean);
    assert!(compute_dic_generic(&samples[..1], DicScope::Field, |t| t[0]).is_err());
}

#[test]
fn tensor_views_for_sh() {
    // SH order 1 maps to the same tensor as its bijection image.
    let b = tensor_sh_bijection(&ModelSpec::tensor2()).unwrap();
    let d = Tensor2::from_eigen([1.7, 0.3, 0.3], &nalgebra::Matrix3::identity());
    let theta = b.clone().transpose().try_inverse().unwrap() * nalgebra::DVector::from_column_slice(&d.0);
    let view = as_tensor(&ModelSpec::sh(1), theta.as_slice()).unwrap();
    assert!(axis_angle_deg(&view.principal_direction(), &Vector3::x()) < 1e-6);
    let (fa, md) = view.fa_md();
    let (fa2, md2) = fa_md_2nd(&d);
    assert!((fa - fa2).abs() < 1e-10 && (md - md2).abs() < 1e-10);
    assert!(as_tensor(&ModelSpec::sh(3), &[0.0; 27]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn profile_equals_diffusivity(c in prop::collection::vec(-2.0f64..2.0, 15)) {
        let spec = ModelSpec::tensor4();
        let mesh = SphereMesh::icosphere(2);
        let vals = profile_values(&spec, &c, &mesh).unwrap();
        for (v, u) in vals.iter().zip(&mesh.vertices) {
            prop_assert!((v - spec.diffusivity(&c, u).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn rgb_ignores_sign(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
        let e = Vector3::new(x, y, z);
        prop_assume!(e.norm() > 1e-3);
        prop_assert_eq!(direction_rgb(&e), direction_rgb(&-e));
    }
}
