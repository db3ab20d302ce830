use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use dynfactor::criteria::{bai_ng_table, select_order};
use dynfactor::estimation::{fit_mle, flatten_params, loadings_table, FitOptions, FittedModel};
use dynfactor::ingest::{compute_returns, filter_missing, load_price_csv, ParseOptions, ReturnOptions, ReturnsPanel};
use dynfactor::nowcast::{
    fit_ar1, fit_bridge, monthly_indicators, BridgeModel, BridgeOptions, GrowthKind, PathChoice, Quarter, QuarterlySeries,
    SampleWindow,
};
use dynfactor::par::{set_global_threads, Parallelism};
use dynfactor::pca::{principal_components, principal_components_with, PcaOptions};
use dynfactor::simulate::simulate_dfm;
use dynfactor::statespace::{DfmParams, DfmSpec};
use dynfactor::validation::{capm_betas, correlation, regress, MarketSeries};
use nalgebra::DMatrix;
use serde_json::json;

use crate::table::{write_json, Cell, Table};
use crate::*;

struct Env {
    out: PathBuf,
    json: bool,
    mode: Parallelism,
}

impl Env {
    fn table(&self, t: &Table) -> Result<(), CliError> {
        let path = t.write(&self.out, self.json)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    fn series(&self, name: &str, panel: &ReturnsPanel) -> Result<(), CliError> {
        let path = self.out.join(name);
        panel.write_csv(&path).context(format!("writing {}", path.display()))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let g = &cli.global;
    if let Some(jobs) = g.jobs {
        if jobs == 0 {
            return Err(CliError::usage("--jobs must be at least 1"));
        }
        set_global_threads(jobs);
    }
    let mode = if g.jobs == Some(1) { Parallelism::Sequential } else { Parallelism::Parallel };
    for input in inputs(&cli.command) {
        if !input.exists() {
            return Err(CliError::data(format!("{}: no such file or directory", input.display())));
        }
    }
    std::fs::create_dir_all(&g.out).map_err(|e| CliError::io(&g.out, e))?;
    let env = Env { out: g.out.clone(), json: g.json, mode };
    match &cli.command {
        Command::Clean(a) => clean(&env, a),
        Command::Pca(a) => pca(&env, a),
        Command::Ic(a) => ic(&env, a),
        Command::Fit(a) => fit(&env, a),
        Command::Capm(a) => capm(&env, a),
        Command::Diagnose(a) => diagnose(&env, a),
        Command::Nowcast(a) => nowcast(&env, a),
        Command::Simulate(a) => simulate(&env, a),
    }
}

fn inputs(cmd: &Command) -> Vec<&Path> {
    match cmd {
        Command::Clean(a) => vec![&a.input],
        Command::Pca(a) => vec![&a.input],
        Command::Ic(a) => vec![&a.input],
        Command::Fit(a) => vec![&a.input],
        Command::Capm(a) => vec![&a.input, &a.market],
        Command::Diagnose(a) => {
            let mut v: Vec<&Path> = vec![&a.input, &a.run];
            v.extend(a.market.as_deref());
            v.extend(a.nested.as_deref());
            v
        }
        Command::Nowcast(a) => vec![&a.gdp, &a.run],
        Command::Simulate(a) => vec![&a.params],
    }
}

fn read_returns(path: &Path) -> Result<ReturnsPanel, CliError> {
    ReturnsPanel::read_csv(path).context(format!("reading {}", path.display()))
}

fn factor_panel(dates: &[NaiveDate], grid: &DMatrix<f64>) -> Result<ReturnsPanel, CliError> {
    let names = (1..=grid.ncols()).map(|j| format!("f{j}")).collect();
    Ok(ReturnsPanel::from_grid(dates.to_vec(), names, grid.clone())?)
}

fn column(m: &DMatrix<f64>, j: usize) -> Vec<f64> {
    m.column(j).iter().copied().collect()
}

fn load_market(path: &Path, already_returns: bool) -> Result<MarketSeries, CliError> {
    let what = format!("reading market {}", path.display());
    let panel = if already_returns {
        read_returns(path)?
    } else {
        let prices = load_price_csv(path, &ParseOptions::default()).context(&what)?;
        compute_returns(&prices, ReturnOptions { center: false, percent: true }).context(&what)?
    };
    if panel.n_series() != 1 {
        return Err(CliError::data(format!("{what}: expected one value column, found {}", panel.n_series())));
    }
    Ok(MarketSeries::from_panel_column(&panel, 0)?)
}

struct Run {
    params: DfmParams,
    smoothed: ReturnsPanel,
    filtered: ReturnsPanel,
}

fn load_run(dir: &Path) -> Result<Run, CliError> {
    let file = |name: &str| dir.join(name);
    let (params, _) = DfmParams::load(file("params.json")).context(format!("reading run {}", dir.display()))?;
    let smoothed = read_returns(&file("factors_smoothed.csv"))?;
    let filtered = read_returns(&file("factors_filtered.csv"))?;
    if smoothed.dates() != filtered.dates() || smoothed.n_series() != params.beta.ncols() {
        return Err(CliError::data(format!("run {} has inconsistent factor files", dir.display())));
    }
    Ok(Run { params, smoothed, filtered })
}

fn clean(env: &Env, a: &CleanArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(CliError::usage(format!("--threshold {} outside [0, 1]", a.threshold)));
    }
    if !a.delimiter.is_ascii() {
        return Err(CliError::usage("--delimiter must be a single ASCII character"));
    }
    let opts = ParseOptions { delimiter: a.delimiter as u8, date_format: a.date_format.clone() };
    let raw = load_price_csv(&a.input, &opts).context(format!("reading {}", a.input.display()))?;
    let kept = filter_missing(&raw, a.threshold)?;
    let returns = compute_returns(&kept, ReturnOptions { center: !a.no_center, percent: !a.no_percent })?;
    env.series("returns.csv", &returns)?;

    let mut report = Table::new("clean_report", &["ticker", "missing_fraction", "kept", "mean_return"]);
    for (t, frac) in raw.tickers().iter().zip(raw.missing_fractions()) {
        let idx = returns.tickers().iter().position(|k| k == t);
        let mean = idx.map_or(f64::NAN, |j| returns.means()[j]);
        report.push(vec![t.as_str().into(), frac.into(), idx.is_some().into(), mean.into()]);
    }
    env.table(&report)?;
    log::info!("kept {} of {} series", kept.n_series(), raw.n_series());
    Ok(())
}

fn pca(env: &Env, a: &PcaArgs) -> Result<(), CliError> {
    let panel = read_returns(&a.input)?;
    let limit = panel.n_series().min(panel.n_obs());
    if a.k == 0 || a.k > limit {
        return Err(CliError::usage(format!("--k must be in 1..={limit}")));
    }
    let res = principal_components_with(&panel, a.k, PcaOptions { correlation: a.correlation })?;
    let ratio = res.explained_ratio();
    let mut eig = Table::new("eigenvalues", &["component", "eigenvalue", "explained", "cumulative"]);
    let mut cum = 0.0;
    for (j, (v, r)) in res.eigenvalues.iter().zip(ratio.iter()).enumerate() {
        cum += r;
        eig.push(vec![(j + 1).into(), (*v).into(), (*r).into(), cum.into()]);
    }
    env.table(&eig)?;

    let mut cols = vec!["ticker".to_string()];
    cols.extend((1..=a.k).map(|j| format!("pc{j}")));
    let mut load = Table::with_columns("loadvectors", cols);
    for (i, t) in panel.tickers().iter().enumerate() {
        let mut row: Vec<Cell> = vec![t.as_str().into()];
        row.extend(res.loadvectors.row(i).iter().map(|v| Cell::Num(*v)));
        load.push(row);
    }
    env.table(&load)?;
    let names = (1..=a.k).map(|j| format!("pc{j}")).collect();
    env.series("components.csv", &ReturnsPanel::from_grid(panel.dates().to_vec(), names, res.components)?)
}

fn ic(env: &Env, a: &IcArgs) -> Result<(), CliError> {
    let panel = read_returns(&a.input)?;
    let limit = panel.n_series().min(panel.n_obs());
    if a.n_max > limit {
        return Err(CliError::usage(format!("--n-max must be at most {limit}")));
    }
    let t = bai_ng_table(&panel, a.n_max)?;
    let mut crit = Table::new("criteria", &["n", "v", "ic1", "ic2", "ic3"]);
    for n in 0..=a.n_max {
        crit.push(vec![n.into(), t.v[n].into(), t.ic1[n].into(), t.ic2[n].into(), t.ic3[n].into()]);
    }
    env.table(&crit)?;
    let mut best = Table::new("criteria_argmin", &["criterion", "n"]);
    for (name, n) in ["ic1", "ic2", "ic3"].iter().zip(t.argmin) {
        best.push(vec![(*name).into(), n.into()]);
    }
    env.table(&best)
}

fn fit(env: &Env, a: &FitArgs) -> Result<(), CliError> {
    let panel = read_returns(&a.input)?.centered();
    if a.n == 0 || a.n > panel.n_series() {
        return Err(CliError::usage(format!("--n must be in 1..={}", panel.n_series())));
    }
    let mut opts = FitOptions { std_errors: !a.no_std_errors, ..Default::default() }.with_parallelism(env.mode);
    opts.bfgs.max_iter = a.max_iter;

    let (p, q) = if a.auto_order {
        if a.p_grid.contains(&0) {
            return Err(CliError::usage("--p-grid entries must be at least 1"));
        }
        let sel = select_order(&panel, a.n, &a.p_grid, &a.q_grid, &opts, env.mode)?;
        let mut t = Table::new("order_selection", &["p", "q", "loglik", "bic", "converged", "error"]);
        for c in &sel.candidates {
            t.push(vec![
                c.p.into(),
                c.q.into(),
                c.loglik.unwrap_or(f64::NAN).into(),
                c.bic.unwrap_or(f64::NAN).into(),
                c.converged.into(),
                c.error.clone().unwrap_or_default().into(),
            ]);
        }
        env.table(&t)?;
        (sel.p, sel.q)
    } else {
        (a.p.expect("required by clap"), a.q.expect("required by clap"))
    };
    let spec = DfmSpec::new(a.n, p, q, panel.n_series()).map_err(|e| CliError::usage(e.to_string()))?;
    let fitted = fit_mle(&panel, &spec, &opts)?;
    if !fitted.converged {
        log::warn!("optimizer stopped without converging ({:?})", fitted.stop_reason);
    }
    write_fit(env, &fitted)
}

fn write_fit(env: &Env, fitted: &FittedModel) -> Result<(), CliError> {
    let path = env.out.join("params.json");
    fitted.params.save(&path, Some(&fitted.tickers)).context(format!("writing {}", path.display()))?;
    env.series("factors_filtered.csv", &factor_panel(&fitted.dates, &fitted.factors_filtered)?)?;
    env.series("factors_smoothed.csv", &factor_panel(&fitted.dates, &fitted.factors_smoothed)?)?;

    let mut load = Table::new("loadings", &["ticker", "factor", "estimate", "std_error", "z", "p_value", "stars"]);
    for r in loadings_table(fitted) {
        let stars = r.stars();
        load.push(vec![r.ticker.into(), r.factor.into(), r.estimate.into(), r.std_error.into(), r.z.into(), r.p_value.into(), stars.into()]);
    }
    env.table(&load)?;

    let mut all = Table::new("parameters", &["parameter", "estimate", "std_error"]);
    let est = flatten_params(&fitted.params);
    let se = fitted.std_errors.as_ref().map(|s| {
        flatten_params(&DfmParams { beta: s.beta.clone(), sigma: s.sigma.clone(), lambda: s.lambda.clone(), psi: s.psi.clone() })
    });
    for (k, (name, v)) in param_names(&fitted.spec, &fitted.tickers).into_iter().zip(est).enumerate() {
        let e = se.as_ref().map_or(f64::NAN, |s| s[k]);
        all.push(vec![name.into(), v.into(), e.into()]);
    }
    env.table(&all)?;

    let report = json!({
        "spec": fitted.spec,
        "n_obs": fitted.dates.len(),
        "loglik": fitted.loglik,
        "init_loglik": fitted.init_loglik,
        "bic": fitted.bic(),
        "converged": fitted.converged,
        "stop_reason": format!("{:?}", fitted.stop_reason),
        "iterations": fitted.iterations,
        "evaluations": fitted.evaluations,
        "hessian_ok": fitted.std_errors.as_ref().map(|s| s.hessian_ok),
    });
    write_json(&env.out, "fit_report.json", &report)?;
    Ok(())
}

/// Labels in the order of [`flatten_params`].
fn param_names(spec: &DfmSpec, tickers: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for t in tickers {
        out.extend((1..=spec.n).map(|j| format!("beta[{t},f{j}]")));
    }
    out.extend(tickers.iter().map(|t| format!("sigma[{t}]")));
    for k in 1..=spec.p {
        for i in 1..=spec.n {
            out.extend((1..=spec.n).map(|j| format!("lambda{k}[f{i},f{j}]")));
        }
    }
    for k in 1..=spec.q {
        out.extend(tickers.iter().map(|t| format!("psi{k}[{t}]")));
    }
    out
}

fn capm(env: &Env, a: &CapmArgs) -> Result<(), CliError> {
    if !a.risk_free.is_finite() {
        return Err(CliError::usage("--risk-free must be finite"));
    }
    let panel = read_returns(&a.input)?;
    let market = load_market(&a.market, a.market_returns)?;
    let res = capm_betas(&panel, &market, a.risk_free)?;
    let mut t = Table::new("capm", &["ticker", "beta", "intercept", "r_squared", "n_obs"]);
    for i in 0..res.tickers.len() {
        t.push(vec![
            res.tickers[i].as_str().into(),
            res.betas[i].into(),
            res.intercepts[i].into(),
            res.r_squared[i].into(),
            res.n_obs[i].into(),
        ]);
    }
    env.table(&t)
}

fn diagnose(env: &Env, a: &DiagnoseArgs) -> Result<(), CliError> {
    let panel = read_returns(&a.input)?.centered();
    let run = load_run(&a.run)?;
    if run.smoothed.dates() != panel.dates() {
        return Err(CliError::data("factor dates do not match the returns panel"));
    }
    let limit = panel.n_series().min(panel.n_obs());
    if a.k == 0 || a.k > limit {
        return Err(CliError::usage(format!("--k must be in 1..={limit}")));
    }
    let f = run.smoothed.returns();
    let n = f.ncols();
    let pcs = principal_components(&panel, a.k)?.components;
    let (index_name, index) = match &a.market {
        Some(path) => ("market", load_market(path, a.market_returns)?.aligned_to(panel.dates())),
        None => ("equal_weighted_mean", panel.row_means()),
    };

    let mut t = Table::new("correlations", &["left", "right", "correlation"]);
    let mut push = |l: String, r: String, x: &[f64], y: &[f64]| -> Result<(), CliError> {
        t.push(vec![l.into(), r.into(), correlation(x, y)?.into()]);
        Ok(())
    };
    for j in 0..n {
        push(format!("f{}", j + 1), index_name.into(), &column(f, j), &index)?;
    }
    for i in 0..a.k {
        push(format!("pc{}", i + 1), index_name.into(), &column(&pcs, i), &index)?;
    }
    for j in 0..n {
        for i in 0..a.k {
            push(format!("f{}", j + 1), format!("pc{}", i + 1), &column(f, j), &column(&pcs, i))?;
        }
    }
    if let Some(path) = &a.market {
        let betas = capm_betas(&panel, &load_market(path, a.market_returns)?, 0.0)?.betas;
        for j in 0..n {
            push(format!("beta_f{}", j + 1), "capm_beta".into(), &column(&run.params.beta, j), &betas)?;
        }
    }
    env.table(&t)?;

    if let Some(dir) = &a.nested {
        let other = load_run(dir)?;
        if other.smoothed.dates() != panel.dates() {
            return Err(CliError::data("nested run dates do not match the returns panel"));
        }
        let g = other.smoothed.returns();
        let xs: Vec<Vec<f64>> = (0..g.ncols()).map(|j| column(g, j)).collect();
        let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let mut nest = Table::new("nesting", &["response", "regressors", "r_squared"]);
        for j in 0..n {
            let fit = regress(&column(f, j), &refs)?;
            nest.push(vec![format!("f{}", j + 1).into(), format!("{} nested factors", g.ncols()).into(), fit.r_squared.into()]);
        }
        env.table(&nest)?;
    }
    Ok(())
}

fn nowcast(env: &Env, a: &NowcastArgs) -> Result<(), CliError> {
    let kind = match a.growth {
        Growth::Yoy => GrowthKind::YearOnYear,
        Growth::Qoq => GrowthKind::QuarterOnQuarter,
    };
    let gdp = QuarterlySeries::load(&a.gdp, kind).context(format!("reading {}", a.gdp.display()))?;
    let run = load_run(&a.run)?;
    let dates = run.smoothed.dates();
    let choice = match a.path {
        PathArg::Split => PathChoice::Split,
        PathArg::Smoothed => PathChoice::Smoothed,
        PathArg::Filtered => PathChoice::Filtered,
    };
    let ind = monthly_indicators(dates, run.smoothed.returns(), run.filtered.returns(), a.boundary, choice)?;
    // Without explicit bounds the window spans the quarters whose three
    // months all have factor data.
    let covered: Vec<Quarter> = ind
        .months
        .iter()
        .map(|m| Quarter::of_date(NaiveDate::from_ymd_opt(m.year, m.month, 1).expect("valid month")))
        .filter(|q| q.months().iter().all(|m| ind.index_of(*m).is_some()))
        .collect();
    let (Some(first), Some(last)) = (covered.first(), covered.last()) else {
        return Err(CliError::data("factor paths do not cover a full quarter"));
    };
    let b = Quarter::of_date(a.boundary);
    let start = a.start.map_or(*first, Quarter::of_date);
    let end = a.end.map_or(*last, Quarter::of_date);
    let window = SampleWindow::new((start, b.prev()), (b, end))?;
    let ar = fit_ar1(&gdp, &window).context("AR(1) baseline")?;
    let br = fit_bridge(&gdp, &ind, &window, &BridgeOptions { standardize: a.standardize }).context("bridge")?;

    let mut pred = Table::new("predictions", &["quarter", "actual", "ar1", "bridge", "sample"]);
    for (x, y) in ar.predictions.iter().zip(&br.predictions) {
        debug_assert_eq!(x.quarter, y.quarter);
        let sample = if x.in_sample { "in" } else { "out" };
        pred.push(vec![x.quarter.to_string().into(), x.actual.into(), x.predicted.into(), y.predicted.into(), sample.into()]);
    }
    env.table(&pred)?;

    let mut rm = Table::new("rmse", &["model", "in_sample", "out_of_sample"]);
    for (name, m) in [("AR(1)", &ar), ("AR(1) with factors", &br)] {
        rm.push(vec![name.into(), m.in_sample_rmse.into(), m.out_sample_rmse.unwrap_or(f64::NAN).into()]);
    }
    env.table(&rm)?;

    let mut coef = Table::new("coefficients", &["model", "regressor", "coefficient"]);
    for (name, m) in [("ar1", &ar), ("bridge", &br)] {
        for (r, c) in m.regressors.iter().zip(m.coefficients.iter()) {
            coef.push(vec![name.into(), r.as_str().into(), (*c).into()]);
        }
    }
    env.table(&coef)?;

    let gain = |f: fn(&BridgeModel) -> Option<f64>| match (f(&ar), f(&br)) {
        (Some(x), Some(y)) if x > 0.0 => Some(100.0 * (1.0 - y / x)),
        _ => None,
    };
    let report = json!({
        "train": [window.train.0.to_string(), window.train.1.to_string()],
        "test": [window.test.0.to_string(), window.test.1.to_string()],
        "in_sample_improvement_pct": gain(|m| Some(m.in_sample_rmse)),
        "out_of_sample_improvement_pct": gain(|m| m.out_sample_rmse),
        "dropped_regressors": br.dropped,
    });
    write_json(&env.out, "nowcast_report.json", &report)?;
    Ok(())
}

fn simulate(env: &Env, a: &SimulateArgs) -> Result<(), CliError> {
    if a.t == 0 {
        return Err(CliError::usage("--t must be at least 1"));
    }
    let (params, tickers) = DfmParams::load(&a.params).context(format!("reading {}", a.params.display()))?;
    let spec = params.spec();
    let out = simulate_dfm(&params, &spec, a.t, a.seed, a.burn_in)?;
    let returns = match tickers {
        Some(t) => ReturnsPanel::from_grid(out.returns.dates().to_vec(), t, out.returns.returns().clone())?,
        None => out.returns,
    };
    env.series("returns.csv", &returns)?;
    env.series("true_factors.csv", &factor_panel(returns.dates(), &out.true_factors)?)
}
