use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ricefield::data_io::*;
use ricefield::design::*;
use ricefield::priors::*;
use ricefield::sampler::*;

fn random_field(n: usize, p: usize, seed: u64, scale: f64) -> ParameterField {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> =
        (0..n).map(|_| (0..p).map(|_| scale * rand::Rng::random_range(&mut r, -1.0..1.0)).collect()).collect();
    ParameterField::from_rows(&rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_covers_without_adjacency(
        dims in (1usize..7, 1usize..7, 1usize..4),
        mask_seed in any::<u64>(),
        r in 0usize..3,
        cycle in 0u64..50,
    ) {
        let dims = [dims.0, dims.1, dims.2];
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let mut mask: Vec<bool> = (0..dims.iter().product()).map(|_| rand::Rng::random_bool(&mut rng, 0.8)).collect();
        mask[0] = true;
        let graph = VoxelGraph::from_mask(dims, &mask).unwrap();
        let part = partition_blocks(&graph, r, cycle);
        let mut covered = HashSet::new();
        for step in &part.steps {
            let mut owner = vec![usize::MAX; graph.len()];
            for (b, block) in step.iter().enumerate() {
                prop_assert!(block.windows(2).all(|w| w[0] < w[1]));
                for &v in block {
                    prop_assert_eq!(owner[v], usize::MAX);
                    owner[v] = b;
                    covered.insert(v);
                }
            }
            for &(v, w) in &graph.edges {
                if owner[v] != usize::MAX && owner[w] != usize::MAX {
                    prop_assert_eq!(owner[v], owner[w]);
                }
            }
        }
        prop_assert_eq!(covered.len(), graph.len());
    }

    #[test]
    fn hyper_draws_respect_constraints(seed in any::<u64>(), scale in 1e-3f64..10.0) {
        let graph = VoxelGraph::full([3, 3, 1]);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let f2 = random_field(graph.len(), 7, seed, scale);
        let h2 = update_hyper_2nd(&f2, &graph, &mut r).unwrap();
        prop_assert!(h2.validate().is_ok());
        let f4 = random_field(graph.len(), 16, seed, scale);
        let h4 = update_hyper_4th(&f4, &graph, &mut r).unwrap();
        prop_assert!(h4.validate().is_ok());
        prop_assert!(h4.alpha() > 0.0 && h4.beta() > 0.0 && h4.delta() > 0.0);
        let fs = random_field(graph.len(), ModelSpec::sh(2).n_params(), seed, scale);
        let s = update_hyper_sh(&fs, &graph, &PowerSpectrum::new(vec![1.0; 3], 0.0).unwrap(), &mut r);
        prop_assert!(s.validate().is_ok());
    }

    #[test]
    fn band_cholesky_matches_dense(n in 1usize..30, bw in 0usize..5, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |i, j| {
            if i.abs_diff(j) <= bw { rand::Rng::random_range(&mut r, -1.0..1.0) } else { 0.0 }
        });
        let spd = &a * a.transpose() + DMatrix::identity(n, n);
        let band = 2 * bw;
        let c = BandCholesky::new(&spd, band).unwrap();
        let dense = spd.clone().cholesky().unwrap();
        let ld: f64 = dense.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        prop_assert!((c.log_det() - ld).abs() < 1e-9 * ld.abs().max(1.0));
        let b: Vec<f64> = (0..n).map(|i| i as f64 - 1.0).collect();
        let x = c.solve_upper(&c.solve_lower(&b));
        let resid = &spd * DVector::from_vec(x) - DVector::from_vec(b);
        prop_assert!(resid.amax() < 1e-9);
    }

    #[test]
    fn gamma_parameters_match_reimplementation(seed in any::<u64>()) {
        let spec = ModelSpec::tensor2();
        let z = spec.design_matrix(&GradientScheme::shells(&[1000.0]).unwrap()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = (0..7).map(|_| rand::Rng::random_range(&mut r, -0.5..0.5)).collect();
        let counts: Vec<u64> = (0..z.nrows()).map(|_| rand::Rng::random_range(&mut r, 0..10)).collect();
        let y: Vec<f64> = (0..z.nrows()).map(|_| rand::Rng::random_range(&mut r, 0.1..3.0)).collect();
        let eta = &z * DVector::from_column_slice(&theta);
        let (a, b) = theta0_conditional(&theta, &counts, 0.7, &z).unwrap();
        let a2: f64 = counts.iter().sum::<u64>() as f64;
        let b2: f64 = eta.iter().map(|e| (2.0 * (e - theta[0])).exp()).sum::<f64>() / 1.4;
        prop_assert!((a - a2).abs() < 1e-12 && (b - b2).abs() < 1e-12 * b2);
        let (s, rt) = sigma2_conditional(&y, &theta, &counts, &z).unwrap();
        let s2: f64 = counts.iter().map(|&n| 2.0 * n as f64 + 1.0).sum();
        let r2: f64 = 0.5 * y.iter().zip(eta.iter()).map(|(yi, e)| yi * yi + (2.0 * e).exp()).sum::<f64>();
        prop_assert!((s - s2).abs() < 1e-12 && (rt - r2).abs() < 1e-12 * r2);
    }
}

fn small_problem(spec: ModelSpec, seed: u64) -> (Problem, ChainState) {
    let mut ph = PhantomSpec::crossing(50.0, None).unwrap();
    // Keep a 4x4x1 corner that straddles the fiber band.
    ph.mask = (0..ph.mask.len())
        .map(|i| {
            let x = i % 16;
            let y = (i / 16) % 16;
            let z = i / 256;
            z == 0 && (3..7).contains(&x) && (3..7).contains(&y)
        })
        .collect();
    let keep: Vec<usize> = (0..512).filter(|&i| ph.mask[i]).collect();
    let rows: Vec<Vec<f64>> = keep.iter().map(|&i| ph.truth.get(i).to_vec()).collect();
    ph.truth = ParameterField::from_rows(&rows).unwrap();
    ph.sigma2 = vec![ph.sigma2[0]; keep.len()];
    let scheme = GradientScheme::shells(&STANDARD_SHELLS).unwrap();
    let data = simulate_phantom(&ph, &scheme, seed).unwrap();
    let init = wls_initialize(&data, &spec, 5000.0).unwrap();
    let problem = Problem::from_dataset(&data, spec).unwrap();
    let hyper = initial_hyper(&spec, &init.theta, &problem.graph).unwrap();
    let state = ChainState { theta: init.theta, sigma2: init.sigma2, hyper, cycle: 0, rng_seed: 0 };
    (problem, state)
}

#[test]
fn zero_cycles_returns_initial_state() {
    let (problem, state) = small_problem(ModelSpec::tensor2(), 1);
    let cfg = SamplerConfig { cycles: 0, ..Default::default() };
    let out = run_chain(&problem, state.clone(), &cfg).unwrap();
    assert_eq!(out.summary.n_samples, 0);
    assert_eq!(out.summary.theta_mean, state.theta.data);
    assert_eq!(out.summary.sigma2_mean, state.sigma2);
    assert!(out.summary.dic.is_none());
    assert!(out.trace.is_empty());
}

#[test]
fn constrained_mode_keeps_tensor4_positive() {
    let (problem, state) = small_problem(ModelSpec::tensor4(), 2);
    let cfg = SamplerConfig { cycles: 30, burn_in: BurnIn::Fixed(10), thin: 1, block_radius: 1, seed: 5, ..Default::default() };
    let out = run_chain(&problem, state, &cfg).unwrap();
    assert!(out.summary.positive_fraction.iter().all(|&f| f == 1.0));
    for draw in &out.draws.theta {
        for v in 0..problem.n_voxels() {
            let c = &draw[v * 16 + 1..(v + 1) * 16];
            assert_eq!(positivity_check(&problem.spec, c).unwrap().verdict, Positivity::Positive);
        }
    }
}

#[test]
fn same_seed_same_summary_any_worker_count() {
    let (problem, state) = small_problem(ModelSpec::tensor2(), 3);
    let run = |workers: usize, seed: u64| {
        let cfg = SamplerConfig { cycles: 20, burn_in: BurnIn::Fixed(5), thin: 3, workers, seed, ..Default::default() };
        serde_json::to_string(&run_chain(&problem, state.clone(), &cfg).unwrap().summary).unwrap()
    };
    let a = run(1, 9);
    assert_eq!(a, run(1, 9));
    assert_eq!(a, run(3, 9));
    assert_ne!(a, run(1, 10));
}

#[test]
fn counting_mode_reports_positive_fraction() {
    let (problem, state) = small_problem(ModelSpec::tensor2(), 4);
    let cfg = SamplerConfig {
        cycles: 20,
        burn_in: BurnIn::Fixed(10),
        thin: 2,
        positivity: PositivityMode::Counting,
        seed: 4,
        ..Default::default()
    };
    let out = run_chain(&problem, state, &cfg).unwrap();
    assert_eq!(out.summary.n_samples, 10);
    assert_eq!(out.draws.theta.len(), 5);
    assert!(out.summary.positive_fraction.iter().all(|f| (0.0..=1.0).contains(f)));
    assert_eq!(out.trace.len(), 10);
}

#[test]
fn invalid_config_rejected() {
    assert!(SamplerConfig { thin: 0, ..Default::default() }.validate().is_err());
    assert!(SamplerConfig { workers: 0, ..Default::default() }.validate().is_err());
    assert!(SamplerConfig { rho: -1.0, ..Default::default() }.validate().is_err());
}
