mod common;

use common::{normal_matrix, rng};
use dynfactor::ingest::{weekdays_from, ReturnsPanel};
use dynfactor::pca::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn returns(x: DMatrix<f64>) -> ReturnsPanel {
    let dates = weekdays_from(chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), x.nrows());
    let tickers = (0..x.ncols()).map(|j| format!("X{j}")).collect();
    ReturnsPanel::from_grid(dates, tickers, x).unwrap()
}

fn brute_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (t, s) = x.shape();
    let means: Vec<f64> = (0..s).map(|j| (0..t).map(|i| x[(i, j)]).sum::<f64>() / t as f64).collect();
    DMatrix::from_fn(s, s, |a, b| {
        let mut acc = 0.0;
        for i in 0..t {
            acc += (x[(i, a)] - means[a]) * (x[(i, b)] - means[b]);
        }
        acc / (t as f64 - 1.0)
    })
}

#[test]
fn covariance_matches_double_loop() {
    let x = normal_matrix(&mut rng(1), 5, 3);
    let c = sample_covariance(&returns(x.clone())).unwrap();
    assert!((c - brute_covariance(&x)).amax() < 1e-12);
}

#[test]
fn block_panel_loadings_follow_blocks() {
    let mut r = rng(2);
    let t = 400;
    let f = normal_matrix(&mut r, t, 2);
    let noise = normal_matrix(&mut r, t, 6) * 0.05;
    // Series 0..3 load on the first factor (large), 3..6 on the second.
    let x = DMatrix::from_fn(t, 6, |i, j| if j < 3 { 3.0 * f[(i, 0)] } else { f[(i, 1)] } + noise[(i, j)]);
    let pca = principal_components(&returns(x), 2).unwrap();
    let a = pca.loadvectors.column(0);
    let b = pca.loadvectors.column(1);
    assert!((0..3).all(|j| a[j].abs() > 0.5) && (3..6).all(|j| a[j].abs() < 0.05));
    assert!((3..6).all(|j| b[j].abs() > 0.5) && (0..3).all(|j| b[j].abs() < 0.05));
}

#[test]
fn residual_matches_explicit_projection() {
    let x = normal_matrix(&mut rng(3), 6, 4);
    let cov = brute_covariance(&x);
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let a = DMatrix::from_fn(4, 2, |i, j| eig.eigenvectors[(i, order[j])]);
    let mut xc = x.clone();
    for mut col in xc.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let resid = &xc - &xc * &a * a.transpose();
    let expect = resid.norm_squared() / 24.0;
    let got = pca_residual_mse(&returns(x), 2).unwrap();
    assert!((got - expect).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn residual_curve_is_monotone(seed in 0u64..100_000, t in 3usize..30, s in 1usize..8) {
        let x = normal_matrix(&mut rng(seed), t, s);
        let curve = residual_mse_curve(&returns(x), s.min(t)).unwrap();
        for w in curve.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0));
        }
    }

    #[test]
    fn eigenvalues_sum_to_total_variance(seed in 0u64..100_000, t in 3usize..30, s in 1usize..8) {
        let x = normal_matrix(&mut rng(seed), t, s) * 2.5;
        let panel = returns(x);
        let pca = principal_components(&panel, 1).unwrap();
        let trace = sample_covariance(&panel).unwrap().trace();
        prop_assert!((pca.eigenvalues.sum() - trace).abs() <= 1e-8 * trace);
    }

    #[test]
    fn components_are_uncorrelated(seed in 0u64..100_000, t in 10usize..40, s in 2usize..7) {
        let x = normal_matrix(&mut rng(seed), t, s);
        let k = s.min(t);
        let pca = principal_components(&returns(x), k).unwrap();
        let c = brute_covariance(&pca.components);
        for i in 0..k {
            for j in 0..i {
                let scale = (c[(i, i)] * c[(j, j)]).sqrt();
                prop_assert!(c[(i, j)].abs() <= 1e-8 * scale.max(f64::MIN_POSITIVE), "{} vs {}", c[(i, j)], scale);
            }
        }
    }
}
