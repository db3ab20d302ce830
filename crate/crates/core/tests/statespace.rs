mod common;

use common::*;
use dynfactor::simulate::simulate_dfm;
use dynfactor::statespace::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn state_space_path_equals_scalar_recursions() {
    let mut r = rng(4);
    for (n, p, q, s) in [(1, 1, 1, 3), (2, 2, 3, 4), (1, 3, 0, 2), (2, 1, 2, 2)] {
        let spec = DfmSpec::new(n, p, q, s).unwrap();
        let params = random_params(&mut r, &spec);
        let model = assemble_state_space(&params, &spec).unwrap();
        let (burn, t_obs, seed) = (30, 80, 99);
        let sim = simulate_dfm(&params, &spec, t_obs, seed, burn).unwrap();

        // Same shock stream pushed through X_{t} = T X_{t-1} + η_t.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.state_dim();
        let fd = spec.factor_dim();
        let mut x = DVector::zeros(d);
        for t in 0..burn + t_obs {
            let mut eta = DVector::zeros(d);
            for k in 0..n {
                eta[k] = StandardNormal.sample(&mut rng);
            }
            for i in 0..s {
                let z: f64 = StandardNormal.sample(&mut rng);
                eta[fd + i] = params.sigma[i] * z;
            }
            x = &model.transit * &x + eta;
            if t >= burn {
                let y = &model.measure * &x;
                for i in 0..s {
                    let want = sim.returns.returns()[(t - burn, i)];
                    assert!((y[i] - want).abs() < 1e-12 * want.abs().max(1.0), "{:?} t {t}", (n, p, q, s));
                }
            }
        }
    }
}

#[test]
fn lyapunov_matches_truncated_series() {
    let mut r = rng(8);
    let model = random_model(&mut r, 6, 2, false);
    let p = stationary_state_covariance(&model).unwrap();
    let mut acc = DMatrix::zeros(6, 6);
    let mut tk = DMatrix::identity(6, 6);
    for _ in 0..=500 {
        acc += &tk * &model.state_noise * tk.transpose();
        tk = &model.transit * tk;
    }
    assert!(max_diff(&p, &acc) < 1e-8);
}

#[test]
fn fitted_factor_ar3_is_stationary() {
    let spec = DfmSpec::new(1, 3, 0, 1).unwrap();
    let params = DfmParams {
        beta: DMatrix::from_element(1, 1, 1.0),
        sigma: DVector::from_element(1, 1.0),
        lambda: [0.1256, 0.0225, 0.1380].iter().map(|v| DMatrix::from_element(1, 1, *v)).collect(),
        psi: vec![],
    };
    params.check_shape(&spec).unwrap();
    let rep = check_stationarity(&params).unwrap();
    assert!(rep.stationary && rep.factor_radius < 0.7);
}

#[test]
fn implied_variance_matches_long_simulation() {
    let mut r = rng(12);
    let spec = DfmSpec::new(2, 2, 2, 3).unwrap();
    let params = random_params(&mut r, &spec);
    let implied = implied_return_variance(&params).unwrap();
    let sim = simulate_dfm(&params, &spec, 1_000_000, 5, 500).unwrap();
    for (i, col) in sim.returns.returns().column_iter().enumerate() {
        let m = col.mean();
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (col.len() as f64 - 1.0);
        assert!((var / implied[i] - 1.0).abs() < 0.02, "series {i}: {var} vs {}", implied[i]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn disassembly_is_exact(seed in 0u64..100_000, n in 1usize..3, p in 1usize..4, q in 0usize..4, extra in 0usize..3) {
        let spec = DfmSpec::new(n, p, q, n + extra).unwrap();
        let params = random_params(&mut rng(seed), &spec);
        let model = assemble_state_space(&params, &spec).unwrap();
        let back = disassemble_state_space(&model, &spec).unwrap();
        prop_assert_eq!(&back.beta, &params.beta);
        prop_assert_eq!(&back.lambda, &params.lambda);
        prop_assert_eq!(&back.psi, &params.psi);
        // sigma is stored squared; sqrt(x·x) = |x| exactly in binary floating point.
        prop_assert_eq!(&back.sigma, &params.sigma);
    }

    #[test]
    fn white_idiosyncratic_block_without_ar_lags(seed in 0u64..100_000, s in 1usize..5) {
        let spec = DfmSpec::new(1, 1, 0, s).unwrap();
        let params = random_params(&mut rng(seed), &spec);
        let model = assemble_state_space(&params, &spec).unwrap();
        prop_assert_eq!(model.state_dim(), 1 + s);
        prop_assert!(model.transit.view((1, 1), (s, s)).iter().all(|v| *v == 0.0));
        let v = implied_return_variance(&params).unwrap();
        let f = factor_covariance(&params).unwrap()[(0, 0)];
        for i in 0..s {
            let want = params.beta[(i, 0)].powi(2) * f + params.sigma[i].powi(2);
            prop_assert!((v[i] - want).abs() < 1e-10 * want);
        }
    }
}
