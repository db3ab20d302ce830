//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero if any gating criterion fails.
//!
//! Criterion 7 needs real market data; point `DYNFACTOR_MARKET_DATA` at a
//! directory holding `prices.csv` (wide closing prices), `index.csv` (one
//! column of index levels on the same calendar) and `gdp.csv`
//! (`year,quarter,growth`).

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use common::*;
use dynfactor::criteria::bai_ng_table;
use dynfactor::estimation::{fit_mle, FitOptions};
use dynfactor::ingest::{compute_returns, filter_missing, load_price_csv, ParseOptions, ReturnOptions};
use dynfactor::kalman::{kalman_filter, kalman_smoother, log_likelihood};
use dynfactor::nowcast::*;
use dynfactor::simulate::{simulate_dfm, sim_start_date, DEFAULT_BURN_IN};
use dynfactor::statespace::{assemble_state_space, disassemble_state_space, DfmParams, DfmSpec};
use dynfactor::transform::{pack, unpack};
use dynfactor::validation::{capm_betas, correlation, regress, MarketSeries};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Line {
    id: usize,
    name: &'static str,
    verdict: Verdict,
    detail: String,
    gating: bool,
}

fn report(lines: &[Line]) -> bool {
    let mut ok = true;
    for l in lines {
        let tag = match l.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Skip => "SKIP",
        };
        let gate = if l.gating { "" } else { " [reported, non-gating]" };
        println!("acceptance {} {:<32} {tag}  {}{gate}", l.id, l.name, l.detail);
        if l.gating && matches!(l.verdict, Verdict::Fail) {
            ok = false;
        }
    }
    ok
}

fn verdict(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

struct Instance {
    model: dynfactor::statespace::StateSpaceModel,
    obs: DMatrix<f64>,
}

fn oracle_instances() -> Vec<Instance> {
    let mut r = rng(2024);
    (0..25)
        .map(|case| {
            let d = r.random_range(1..=6);
            let s = r.random_range(1..=4);
            let t_obs = r.random_range(1..=8);
            let model = random_model(&mut r, d, s, case % 2 == 0);
            let mut obs = sample_obs(&mut r, &model, t_obs);
            if case % 3 == 0 {
                obs[(r.random_range(0..t_obs), r.random_range(0..s))] = f64::NAN;
            }
            Instance { model, obs }
        })
        .collect()
}

fn criterion_1(inst: &[Instance]) -> Line {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    for i in inst {
        let ll = log_likelihood(&i.model, &i.obs, None).unwrap();
        worst = worst.max((ll - JointGaussian::new(&i.model, &i.obs).log_density()).abs());
    }
    let el = start.elapsed();
    Line {
        id: 1,
        name: "likelihood oracle",
        verdict: verdict(worst < 1e-8 && el < Duration::from_secs(10)),
        detail: format!("25 models, max |Δ| = {worst:.2e} (tol 1e-8), {:.2} s (limit 10 s)", el.as_secs_f64()),
        gating: true,
    }
}

fn criterion_2(inst: &[Instance]) -> Line {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    for i in inst {
        let oracle = JointGaussian::new(&i.model, &i.obs);
        let sm = kalman_smoother(&i.model, &kalman_filter(&i.model, &i.obs, None).unwrap()).unwrap();
        for t in 0..i.obs.nrows() {
            let (mean, cov) = oracle.conditional(t);
            worst = worst.max((sm.smooth_mean.row(t).transpose() - mean).amax());
            worst = worst.max(max_diff(&sm.smooth_cov[t], &cov));
        }
    }
    let el = start.elapsed();
    Line {
        id: 2,
        name: "smoother oracle",
        verdict: verdict(worst < 1e-8 && el < Duration::from_secs(10)),
        detail: format!("25 models, max |Δ| = {worst:.2e} (tol 1e-8), {:.2} s (limit 10 s)", el.as_secs_f64()),
        gating: true,
    }
}

fn one_factor_truth(s: usize, seed: u64) -> (DfmParams, DfmSpec) {
    let mut r = rng(seed);
    let spec = DfmSpec::new(1, 1, 1, s).unwrap();
    let params = DfmParams {
        beta: DMatrix::from_fn(s, 1, |_, _| r.random_range(0.5..1.5)),
        sigma: DVector::from_fn(s, |_, _| r.random_range(0.6..1.2)),
        lambda: vec![DMatrix::from_element(1, 1, 0.5)],
        psi: vec![DVector::from_fn(s, |_, _| r.random_range(-0.3..0.5))],
    };
    (params, spec)
}

/// Criteria 3 and 5 share the same ten fitted panels.
fn criteria_3_and_5() -> (Line, Line) {
    let start = Instant::now();
    let opts = FitOptions { std_errors: false, ..Default::default() };
    let (mut beta_ok, mut dyn_ok, mut min_corr, mut min_index) = (0, 0, f64::INFINITY, f64::INFINITY);
    let (mut worst_lambda, mut worst_psi) = (0.0_f64, 0.0_f64);
    for seed in 0..10u64 {
        let (params, spec) = one_factor_truth(10, 100 + seed);
        let panel = simulate_dfm(&params, &spec, 2000, 7000 + seed, DEFAULT_BURN_IN).unwrap().returns.centered();
        let fit = fit_mle(&panel, &spec, &opts).unwrap();
        let b: Vec<f64> = fit.params.beta.column(0).iter().copied().collect();
        let t: Vec<f64> = params.beta.column(0).iter().copied().collect();
        let c = correlation(&b, &t).unwrap().abs();
        min_corr = min_corr.min(c);
        beta_ok += usize::from(c > 0.97);
        let dl = (fit.params.lambda[0][(0, 0)] - 0.5).abs();
        let dp = (&fit.params.psi[0] - &params.psi[0]).amax();
        worst_lambda = worst_lambda.max(dl);
        worst_psi = worst_psi.max(dp);
        dyn_ok += usize::from(dl <= 0.08 && dp <= 0.08);

        let f: Vec<f64> = fit.factors_smoothed.column(0).iter().copied().collect();
        min_index = min_index.min(correlation(&f, &panel.row_means()).unwrap().abs());
    }
    let el = start.elapsed();
    let c3 = Line {
        id: 3,
        name: "parameter recovery",
        verdict: verdict(beta_ok == 10 && dyn_ok >= 8 && el < Duration::from_secs(300)),
        detail: format!(
            "beta corr > 0.97 in {beta_ok}/10 (min {min_corr:.4}); Λ₁ and all ψ within ±0.08 in {dyn_ok}/10 \
             (need 8; worst |ΔΛ₁| {worst_lambda:.3}, |Δψ| {worst_psi:.3}); {:.1} s (limit 300 s)",
            el.as_secs_f64()
        ),
        gating: true,
    };
    let c5 = Line {
        id: 5,
        name: "synthetic index correlation",
        verdict: verdict(min_index > 0.9),
        detail: format!("smoothed factor vs equal-weighted mean return, min |corr| over 10 panels = {min_index:.4} (need > 0.9)"),
        gating: true,
    };
    (c3, c5)
}

fn criterion_4() -> Line {
    let (mut all_one, mut small_below_zero) = (0, 0);
    for seed in 0..50u64 {
        let t = bai_ng_table(&panel_from(strong_one_factor(seed, 50, 500)), 8).unwrap();
        all_one += usize::from(t.argmin == [1, 1, 1]);
        let lower = [&t.ic1, &t.ic2, &t.ic3].iter().all(|ic| ic[1] < ic[0] && ic[2] < ic[0]);
        small_below_zero += usize::from(lower);
    }
    Line {
        id: 4,
        name: "factor-count selection",
        verdict: verdict(all_one >= 40 && small_below_zero == 50),
        detail: format!(
            "IC1-IC3 all pick n=1 in {all_one}/50 (need 40); IC(1), IC(2) < IC(0) in {small_below_zero}/50 panels"
        ),
        gating: true,
    }
}

fn weekdays_through(end: NaiveDate) -> usize {
    let mut n = 0;
    let mut d = sim_start_date();
    while d <= end {
        if chrono::Datelike::weekday(&d).number_from_monday() <= 5 {
            n += 1;
        }
        d = d.succ_opt().unwrap();
    }
    n
}

fn criterion_6() -> Line {
    // Random-indicator datasets for the nesting property.
    let mut nested = true;
    let days = dynfactor::ingest::weekdays_from(sim_start_date(), weekdays_through(NaiveDate::from_ymd_opt(2008, 12, 31).unwrap()));
    let quarters: Vec<Quarter> = (0..36).map(|i| Quarter::new(2000 + i / 4, (i % 4) as u32 + 1).unwrap()).collect();
    let boundary = NaiveDate::from_ymd_opt(2007, 1, 1).unwrap();
    let window = SampleWindow::split_at(NaiveDate::from_ymd_opt(2000, 4, 1).unwrap(), boundary, *days.last().unwrap()).unwrap();
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let gdp = QuarterlySeries::new(quarters.clone(), (0..36).map(|_| r.random_range(-4.0..8.0)).collect()).unwrap();
        let ind = monthly_stats(&days, &normal_matrix(&mut r, days.len(), 1 + (seed as usize % 2))).unwrap();
        let ar = fit_ar1(&gdp, &window).unwrap();
        let br = fit_bridge(&gdp, &ind, &window, &BridgeOptions::default()).unwrap();
        nested &= br.in_sample_rmse <= ar.in_sample_rmse * (1.0 + 1e-12);
    }

    // Synthetic GDP driven by the true monthly factor means.
    let (params, spec) = one_factor_truth(10, 77);
    let sim = simulate_dfm(&params, &spec, days.len(), 78, DEFAULT_BURN_IN).unwrap();
    let panel = sim.returns.centered();
    let truth = monthly_stats(panel.dates(), &sim.true_factors).unwrap();
    let mut r = rng(79);
    let weights = [2.0, 3.0, 4.0];
    let values: Vec<f64> = quarters
        .iter()
        .map(|q| {
            let signal: f64 = q
                .months()
                .iter()
                .zip(weights)
                .map(|(m, w)| w * truth.mean[(truth.index_of(*m).unwrap(), 0)])
                .sum();
            1.5 + signal + 0.3 * r.sample::<f64, _>(rand_distr::StandardNormal)
        })
        .collect();
    let gdp = QuarterlySeries::new(quarters.clone(), values).unwrap();
    let fit = fit_mle(&panel, &spec, &FitOptions { std_errors: false, ..Default::default() }).unwrap();
    let ind = monthly_indicators(panel.dates(), &fit.factors_smoothed, &fit.factors_filtered, boundary, PathChoice::Split).unwrap();
    let ar = fit_ar1(&gdp, &window).unwrap();
    let br = fit_bridge(&gdp, &ind, &window, &BridgeOptions::default()).unwrap();
    nested &= br.in_sample_rmse <= ar.in_sample_rmse * (1.0 + 1e-12);
    let (ao, bo) = (ar.out_sample_rmse.unwrap(), br.out_sample_rmse.unwrap());
    let gain = 1.0 - bo / ao;
    Line {
        id: 6,
        name: "nested-bridge dominance",
        verdict: verdict(nested && gain >= 0.20),
        detail: format!(
            "in-sample bridge ≤ AR(1) on 21/21 datasets: {nested}; synthetic GDP out-of-sample RMSE {ao:.4} → {bo:.4} \
             ({:.1}% better, need ≥ 20%)",
            100.0 * gain
        ),
        gating: true,
    }
}

fn criterion_7() -> Line {
    let skip = |why: String| Line { id: 7, name: "market-data reproduction", verdict: Verdict::Skip, detail: why, gating: false };
    let Some(dir) = std::env::var_os("DYNFACTOR_MARKET_DATA").map(PathBuf::from) else {
        return skip("data not available (set DYNFACTOR_MARKET_DATA)".into());
    };
    let files = ["prices.csv", "index.csv", "gdp.csv"].map(|f| dir.join(f));
    if let Some(missing) = files.iter().find(|p| !p.exists()) {
        return skip(format!("data not available ({} missing)", missing.display()));
    }
    let run = || -> dynfactor::error::Result<String> {
        let prices = filter_missing(&load_price_csv(&files[0], &ParseOptions::default())?, 0.01)?;
        let returns = compute_returns(&prices, ReturnOptions::default())?;
        let index = compute_returns(&load_price_csv(&files[1], &ParseOptions::default())?, ReturnOptions { center: false, percent: true })?;
        let market = MarketSeries::from_panel_column(&index, 0)?;
        let spec = DfmSpec::new(1, 3, 5, returns.n_series())?;
        let fit = fit_mle(&returns, &spec, &FitOptions { std_errors: false, ..Default::default() })?;
        let capm = capm_betas(&returns, &market, 0.0)?;
        let loadings: Vec<f64> = fit.params.beta.column(0).iter().copied().collect();
        let a = correlation(&loadings, &capm.betas)?;
        let f: Vec<f64> = fit.factors_smoothed.column(0).iter().copied().collect();
        let b = correlation(&f, &market.aligned_to(returns.dates()))?;
        let gdp = QuarterlySeries::load(&files[2], GrowthKind::YearOnYear)?;
        let window = SampleWindow::new(
            (Quarter::new(2015, 1)?, Quarter::new(2020, 4)?),
            (Quarter::new(2021, 1)?, Quarter::new(2022, 4)?),
        )?;
        let ar = fit_ar1(&gdp, &window)?;
        let ao = ar.out_sample_rmse.unwrap_or(f64::NAN);
        let ok = (a - 0.8348).abs() <= 0.05
            && (b - 0.9283).abs() <= 0.05
            && (ar.in_sample_rmse - 3.8533).abs() <= 0.5
            && (ao - 12.3095).abs() <= 0.5;
        Ok(format!(
            "{}: loading/beta corr {a:.4} (0.8348 ± 0.05), factor/index corr {b:.4} (0.9283 ± 0.05), \
             AR(1) RMSE {:.4} / {ao:.4} (3.8533 / 12.3095 ± 0.5)",
            if ok { "within tolerance" } else { "outside tolerance" },
            ar.in_sample_rmse
        ))
    };
    match run() {
        Ok(detail) => Line { id: 7, name: "market-data reproduction", verdict: Verdict::Pass, detail, gating: false },
        Err(e) => Line { id: 7, name: "market-data reproduction", verdict: Verdict::Fail, detail: e.to_string(), gating: false },
    }
}

type Check = (&'static str, Box<dyn Fn(&mut TestRunner) -> Result<(), String>>);

fn invariant_checks() -> Vec<Check> {
    fn err<T: std::fmt::Debug>(e: proptest::test_runner::TestError<T>) -> String {
        e.to_string()
    }
    vec![
        (
            "ingest filter idempotence",
            Box::new(|r: &mut TestRunner| {
                r.run(&(0u64..100_000, 0.0f64..0.3), |(seed, thr)| {
                    let mut g = rng(seed);
                    let prices = DMatrix::from_fn(30, 5, |_, _| if g.random_bool(0.05) { f64::NAN } else { g.random_range(1.0..9.0) });
                    let dates = dynfactor::ingest::weekdays_from(sim_start_date(), 30);
                    let tickers = (0..5).map(|j| format!("P{j}")).collect();
                    let p = dynfactor::ingest::PricePanel::new(dates, tickers, prices).unwrap();
                    if let Ok(once) = filter_missing(&p, thr) {
                        let twice = filter_missing(&once, thr).unwrap();
                        prop_assert_eq!(twice.tickers(), once.tickers());
                        let bits = |m: &DMatrix<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                        prop_assert_eq!(bits(twice.prices()), bits(once.prices()));
                    }
                    Ok(())
                })
                .map_err(err)
            }),
        ),
        (
            "pca monotone residual, trace",
            Box::new(|r: &mut TestRunner| {
                r.run(&(0u64..100_000, 3usize..20, 1usize..6), |(seed, t, s)| {
                    let panel = panel_from(normal_matrix(&mut rng(seed), t, s));
                    let curve = dynfactor::pca::residual_mse_curve(&panel, s.min(t)).unwrap();
                    prop_assert!(curve.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].max(1.0)));
                    let ev = dynfactor::pca::principal_components(&panel, 1).unwrap().eigenvalues.sum();
                    let tr = dynfactor::pca::sample_covariance(&panel).unwrap().trace();
                    prop_assert!((ev - tr).abs() <= 1e-8 * tr);
                    Ok(())
                })
                .map_err(err)
            }),
        ),
        (
            "criteria penalty monotone",
            Box::new(|r: &mut TestRunner| {
                r.run(&(1e-3f64..1e3, 0usize..20, 3usize..2000, 3usize..5000), |(v, n, nn, tt)| {
                    let (a, b) = (dynfactor::criteria::bai_ng(v, n, nn, tt), dynfactor::criteria::bai_ng(v, n + 1, nn, tt));
                    prop_assert!((0..3).all(|k| b[k] > a[k]));
                    Ok(())
                })
                .map_err(err)
            }),
        ),
        (
            "state space disassembly exact",
            Box::new(|r: &mut TestRunner| {
                r.run(&(0u64..100_000, 1usize..3, 1usize..4, 0usize..4), |(seed, n, p, q)| {
                    let spec = DfmSpec::new(n, p, q, n + 2).unwrap();
                    let params = random_params(&mut rng(seed), &spec);
                    let back = disassemble_state_space(&assemble_state_space(&params, &spec).unwrap(), &spec).unwrap();
                    prop_assert_eq!(back, params);
                    Ok(())
                })
                .map_err(err)
            }),
        ),
        (
            "kalman symmetric PSD, terminal",
            Box::new(|r: &mut TestRunner| {
                r.run(&(0u64..100_000, 1usize..6, 1usize..4, 1usize..10), |(seed, d, s, t)| {
                    let mut g = rng(seed);
                    let model = random_model(&mut g, d, s, seed % 2 == 0);
                    let obs = sample_obs(&mut g, &model, t);
                    let filt = kalman_filter(&model, &obs, None).unwrap();
                    let sm = kalman_smoother(&model, &filt).unwrap();
                    for k in 0..t {
                        for c in [&filt.pred_cov[k], &filt.filt_cov[k], &sm.smooth_cov[k]] {
                            prop_assert_eq!(c, &c.transpose());
                            prop_assert!(min_eigenvalue(c) >= -1e-8);
                        }
                    }
                    prop_assert_eq!(&sm.smooth_cov[t - 1], &filt.filt_cov[t - 1]);
                    Ok(())
                })
                .map_err(err)
            }),
        ),
        (
            "estimation pack/unpack round trip",
            Box::new(|r: &mut TestRunner| {
                r.run(&(0u64..100_000, 1usize..3, 1usize..4, 0usize..4), |(seed, n, p, q)| {
                    let spec = DfmSpec::new(n, p, q, n + 1).unwrap();
                    let params = random_params(&mut rng(seed), &spec);
                    let back = unpack(&pack(&params).unwrap(), &spec).unwrap();
                    prop_assert!((back.beta - &params.beta).amax() < 1e-12);
                    prop_assert!(back.lambda.iter().zip(&params.lambda).all(|(a, b)| (a - b).amax() < 1e-12));
                    prop_assert!(back.psi.iter().zip(&params.psi).all(|(a, b)| (a - b).amax() < 1e-12));
                    Ok(())
                })
                .map_err(err)
            }),
        ),
        (
            "validation affine invariance, R²",
            Box::new(|r: &mut TestRunner| {
                r.run(&(0u64..100_000, 0.01f64..20.0, -5.0f64..5.0), |(seed, c1, c2)| {
                    let x = normal_matrix(&mut rng(seed), 50, 2);
                    let a: Vec<f64> = x.column(0).iter().copied().collect();
                    let b: Vec<f64> = x.column(1).iter().zip(&a).map(|(u, v)| u + 0.5 * v).collect();
                    let base = correlation(&a, &b).unwrap();
                    let moved: Vec<f64> = b.iter().map(|v| -c1 * v + c2).collect();
                    prop_assert!((correlation(&a, &moved).unwrap() + base).abs() < 1e-12);
                    prop_assert!((regress(&b, &[&a]).unwrap().r_squared - base * base).abs() < 1e-10);
                    Ok(())
                })
                .map_err(err)
            }),
        ),
        (
            "nowcast nesting, shift invariance",
            Box::new(|r: &mut TestRunner| {
                r.run(&(0u64..100_000, -5.0f64..5.0), |(seed, c)| {
                    let days = dynfactor::ingest::weekdays_from(sim_start_date(), 261 * 6);
                    let mut g = rng(seed);
                    let path = normal_matrix(&mut g, days.len(), 1);
                    let a = monthly_stats(&days, &path).unwrap();
                    let b = monthly_stats(&days, &path.add_scalar(c)).unwrap();
                    prop_assert!((b.mean - a.mean.add_scalar(c)).amax() < 1e-12);
                    prop_assert!((b.std - &a.std).amax() < 1e-12);
                    let quarters: Vec<Quarter> = (0..24).map(|i| Quarter::new(2000 + i / 4, (i % 4) as u32 + 1).unwrap()).collect();
                    let gdp = QuarterlySeries::new(quarters, (0..24).map(|_| g.random_range(-3.0..5.0)).collect()).unwrap();
                    let w = SampleWindow::new(
                        (Quarter::new(2000, 2).unwrap(), Quarter::new(2004, 4).unwrap()),
                        (Quarter::new(2005, 1).unwrap(), Quarter::new(2005, 4).unwrap()),
                    )
                    .unwrap();
                    let ar = fit_ar1(&gdp, &w).unwrap();
                    let br = fit_bridge(&gdp, &a, &w, &BridgeOptions::default()).unwrap();
                    prop_assert!(br.in_sample_rmse <= ar.in_sample_rmse * (1.0 + 1e-12));
                    Ok(())
                })
                .map_err(err)
            }),
        ),
        (
            "simulate determinism",
            Box::new(|r: &mut TestRunner| {
                r.run(&(0u64..100_000,), |(seed,)| {
                    let spec = DfmSpec::new(1, 2, 1, 3).unwrap();
                    let params = random_params(&mut rng(seed), &spec);
                    let a = simulate_dfm(&params, &spec, 40, seed, 20).unwrap();
                    let b = simulate_dfm(&params, &spec, 40, seed, 20).unwrap();
                    prop_assert_eq!(a.returns, b.returns);
                    Ok(())
                })
                .map_err(err)
            }),
        ),
    ]
}

fn criterion_8() -> Line {
    let mut failed = Vec::new();
    let checks = invariant_checks();
    for (name, check) in &checks {
        let mut runner = TestRunner::new(Config { cases: 64, failure_persistence: None, ..Config::default() });
        if let Err(e) = check(&mut runner) {
            let msg: String = e.chars().take(300).collect();
            failed.push(format!("{name}: {msg}"));
        }
    }
    Line {
        id: 8,
        name: "invariant suites",
        verdict: verdict(failed.is_empty()),
        detail: if failed.is_empty() {
            format!("{} property groups × 64 cases hold (full per-module suites run under cargo test)", checks.len())
        } else {
            failed.join("; ")
        },
        gating: true,
    }
}

fn main() {
    let inst = oracle_instances();
    let c1 = criterion_1(&inst);
    let c2 = criterion_2(&inst);
    let (c3, c5) = criteria_3_and_5();
    let c4 = criterion_4();
    let c6 = criterion_6();
    let c7 = criterion_7();
    let c8 = criterion_8();
    if !report(&[c1, c2, c3, c4, c5, c6, c7, c8]) {
        std::process::exit(1);
    }
}
