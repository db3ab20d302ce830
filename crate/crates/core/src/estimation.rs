//! Maximum-likelihood fitting of the dynamic factor model.
//!
//! Parameters are optimised in the unconstrained space of [`crate::transform`]
//! by BFGS on the negative Kalman log-likelihood. Starting values come from
//! principal components, and standard errors from a numerical Hessian mapped
//! back through the transform by the delta method.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::ingest::ReturnsPanel;
use crate::kalman::{kalman_filter_with, kalman_smoother, FilterConfig, KalmanWorkspace};
use crate::linalg::{least_squares, spectral_radius};
use crate::optim::{minimize_bfgs, numerical_hessian, BfgsOptions, Objective, StopReason};
use crate::par::Parallelism;
use crate::pca::{design, sorted_eigen};
use crate::statespace::{ar_companion, assemble_state_space, var_companion, DfmParams, DfmSpec};
use crate::transform::{pack, unpack};

/// Two-sided 5% critical value of the standard normal.
pub const Z_CRITICAL: f64 = 1.959_964;

/// Spectral radius the initial VAR/AR coefficients are shrunk below.
pub const INIT_MAX_RADIUS: f64 = 0.98;

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub bfgs: BfgsOptions,
    pub filter: FilterConfig,
    pub std_errors: bool,
    /// Relative finite-difference step for the Hessian.
    pub hessian_step: f64,
    /// Starting point; PCA-based initialisation when `None`.
    pub init: Option<DfmParams>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            bfgs: BfgsOptions::default(),
            filter: FilterConfig::default(),
            std_errors: true,
            hessian_step: 1e-4,
            init: None,
        }
    }
}

impl FitOptions {
    pub fn with_parallelism(mut self, mode: Parallelism) -> Self {
        self.bfgs.parallelism = mode;
        self
    }
}

/// Standard errors shaped like [`DfmParams`]; `NaN` marks coordinates the
/// Hessian could not identify.
#[derive(Debug, Clone, PartialEq)]
pub struct StdErrors {
    pub beta: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub lambda: Vec<DMatrix<f64>>,
    pub psi: Vec<DVector<f64>>,
    /// False when the Hessian was not positive definite.
    pub hessian_ok: bool,
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub params: DfmParams,
    pub spec: DfmSpec,
    pub loglik: f64,
    /// Log-likelihood at the starting point.
    pub init_loglik: f64,
    pub std_errors: Option<StdErrors>,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub evaluations: usize,
    /// `T × n` filtered factor means.
    pub factors_filtered: DMatrix<f64>,
    /// `T × n` smoothed factor means.
    pub factors_smoothed: DMatrix<f64>,
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
}

impl FittedModel {
    pub fn bic(&self) -> f64 {
        crate::criteria::bic(self.loglik, self.spec.bic_param_count(), self.dates.len())
    }
}

/// Negative log-likelihood over the packed parameter vector.
pub(crate) struct NegLogLik<'a> {
    pub spec: DfmSpec,
    pub obs: &'a DMatrix<f64>,
    pub cfg: FilterConfig,
}

impl NegLogLik<'_> {
    fn try_eval(&self, ws: &mut KalmanWorkspace, x: &DVector<f64>) -> Result<f64> {
        let params = unpack(x, &self.spec)?;
        let model = assemble_state_space(&params, &self.spec)?;
        Ok(-ws.log_likelihood(&model, self.obs, None, &self.cfg)?)
    }
}

impl Objective for NegLogLik<'_> {
    type Workspace = KalmanWorkspace;

    fn workspace(&self) -> KalmanWorkspace {
        KalmanWorkspace::new(self.spec.state_dim(), self.spec.s)
    }

    fn eval(&self, ws: &mut KalmanWorkspace, x: &DVector<f64>) -> f64 {
        self.try_eval(ws, x).unwrap_or(f64::INFINITY)
    }
}

fn check_panel(returns: &ReturnsPanel, spec: &DfmSpec) -> Result<()> {
    spec.validate()?;
    if spec.s != returns.n_series() {
        return Err(Error::Dimension(format!("spec has S = {}, panel has {} series", spec.s, returns.n_series())));
    }
    if spec.s < spec.n {
        return Err(Error::InvalidArgument(format!("need at least n = {} series, got {}", spec.n, spec.s)));
    }
    let lags = spec.p.max(spec.q);
    if returns.n_obs() <= lags + spec.n + 2 {
        return Err(Error::Data(format!("{} observations are too few for {spec:?}", returns.n_obs())));
    }
    Ok(())
}

/// Lagged design `[x_{t−1} … x_{t−p}]` for `t = p..T` over the columns of `x`.
fn lagged(x: &DMatrix<f64>, p: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (t, k) = x.shape();
    let rows = t - p;
    let design = DMatrix::from_fn(rows, k * p, |r, c| x[(r + p - 1 - c / k, c % k)]);
    let target = x.rows(p, rows).into_owned();
    (design, target)
}

/// Starting values from principal components.
///
/// Loadings are the leading eigenvectors scaled by the square roots of their
/// eigenvalues; the factor VAR is fitted by least squares on the standardised
/// scores and rescaled to unit innovations, then the loadings are rotated so
/// the top block is lower triangular with a nonnegative diagonal. Idiosyncratic
/// AR coefficients and scales come from per-series least squares on the PCA
/// residuals. Dynamics are shrunk by 0.9 until stable.
pub fn initialize_params(returns: &ReturnsPanel, spec: &DfmSpec) -> Result<DfmParams> {
    check_panel(returns, spec)?;
    let DfmSpec { n, p, q, s } = *spec;
    let x = design(returns, false)?;
    let t = x.nrows();
    let sd: Vec<f64> = x.column_iter().map(|c| (c.norm_squared() / (t as f64 - 1.0)).sqrt()).collect();
    if let Some(j) = sd.iter().position(|&v| v == 0.0) {
        return Err(Error::Degenerate(format!("series {} has zero variance", returns.tickers()[j])));
    }
    let cov = x.tr_mul(&x) / (t as f64 - 1.0);
    let (values, vectors) = sorted_eigen(&cov)?;
    let vecs = vectors.columns(0, n).into_owned();
    let root: Vec<f64> = (0..n).map(|j| values[j].max(f64::MIN_POSITIVE).sqrt()).collect();
    let mut beta = DMatrix::from_fn(s, n, |i, j| vecs[(i, j)] * root[j]);
    let mut scores = &x * &vecs;
    for (j, mut col) in scores.column_iter_mut().enumerate() {
        col /= root[j];
    }

    // Factor VAR by least squares, one equation per factor.
    let (xd, yd) = lagged(&scores, p);
    let mut coef = DMatrix::zeros(n, n * p);
    let mut resid = yd.clone();
    for a in 0..n {
        let b = least_squares(&xd, &yd.column(a).into_owned()).unwrap_or_else(|_| DVector::zeros(n * p));
        coef.row_mut(a).copy_from(&b.transpose());
        resid.set_column(a, &(yd.column(a) - &xd * &b));
    }
    let omega = resid.tr_mul(&resid) / resid.nrows().max(1) as f64;
    let w = nalgebra::Cholesky::new(omega.clone() + DMatrix::identity(n, n) * 1e-12 * omega.trace().max(1e-300))
        .map(|c| c.l())
        .unwrap_or_else(|| DMatrix::identity(n, n));
    let w_inv = w.clone().try_inverse().unwrap_or_else(|| DMatrix::identity(n, n));
    let mut lambda: Vec<DMatrix<f64>> = (0..p).map(|k| &w_inv * coef.columns(k * n, n) * &w).collect();
    beta = &beta * &w;

    // Rotate so the top block is lower triangular: top = Rᵀ Qᵀ.
    let qr = beta.rows(0, n).transpose().qr();
    let mut rot = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            rot.column_mut(j).neg_mut();
        }
    }
    beta = &beta * &rot;
    for l in lambda.iter_mut() {
        *l = rot.transpose() * &*l * &rot;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            beta[(i, j)] = 0.0;
        }
        beta[(i, i)] = beta[(i, i)].max(0.0);
    }

    // Idiosyncratic part from the PCA residual.
    let common = &x * &vecs * vecs.transpose();
    let idio = &x - common;
    let mut sigma = DVector::zeros(s);
    let mut psi = vec![DVector::zeros(s); q];
    for i in 0..s {
        let e = idio.column(i).into_owned();
        let floor = 1e-3 * sd[i];
        let mut innov = e.clone();
        if q > 0 {
            let (xd, yd) = lagged(&DMatrix::from_column_slice(t, 1, e.as_slice()), q);
            if let Ok(b) = least_squares(&xd, &yd.column(0).into_owned()) {
                innov = yd.column(0) - &xd * &b;
                for j in 0..q {
                    psi[j][i] = b[j];
                }
            }
        }
        let var = innov.norm_squared() / innov.len().max(1) as f64;
        sigma[i] = var.sqrt().max(floor);
    }

    let mut params = DfmParams { beta, sigma, lambda, psi };
    shrink_until_stable(&mut params)?;
    Ok(params)
}

fn shrink_until_stable(params: &mut DfmParams) -> Result<()> {
    for _ in 0..400 {
        let mut stable = spectral_radius(&var_companion(&params.lambda))? <= INIT_MAX_RADIUS;
        for i in 0..params.sigma.len() {
            if !stable {
                break;
            }
            stable = spectral_radius(&ar_companion(&params.psi_of(i)))? <= INIT_MAX_RADIUS;
        }
        if stable {
            return Ok(());
        }
        params.lambda.iter_mut().for_each(|l| *l *= 0.9);
        params.psi.iter_mut().for_each(|v| *v *= 0.9);
    }
    Err(Error::Numerical("initial dynamics could not be made stationary".into()))
}

/// Maximises the Kalman log-likelihood over all model parameters.
pub fn fit_mle(returns: &ReturnsPanel, spec: &DfmSpec, opts: &FitOptions) -> Result<FittedModel> {
    check_panel(returns, spec)?;
    let init = match &opts.init {
        Some(p) => {
            p.check_shape(spec)?;
            p.clone()
        }
        None => initialize_params(returns, spec)?,
    };
    let obj = NegLogLik { spec: *spec, obs: returns.returns(), cfg: opts.filter };
    let x0 = pack(&init)?;
    let mut ws = obj.workspace();
    let f0 = obj.try_eval(&mut ws, &x0)?;
    if !f0.is_finite() {
        return Err(Error::Numerical("log-likelihood is not finite at the starting point".into()));
    }
    let res = minimize_bfgs(&obj, &x0, &opts.bfgs)?;
    let x = if res.value <= f0 { res.x.clone() } else { x0 };
    let params = unpack(&x, spec)?;
    let mut fitted = finish(returns, spec, params, opts.filter)?;
    fitted.init_loglik = -f0;
    fitted.converged = res.converged();
    fitted.stop_reason = res.reason;
    fitted.iterations = res.iterations;
    fitted.evaluations = res.evaluations;
    if !fitted.converged {
        log::warn!("optimizer stopped without converging ({:?}) after {} iterations", res.reason, res.iterations);
    }
    if opts.std_errors {
        fitted.std_errors = Some(standard_errors_with(&fitted, returns, opts)?);
    }
    Ok(fitted)
}

/// Runs the filter and smoother at fixed parameters.
pub fn evaluate_params(returns: &ReturnsPanel, spec: &DfmSpec, params: DfmParams) -> Result<FittedModel> {
    check_panel(returns, spec)?;
    params.check_shape(spec)?;
    finish(returns, spec, params, FilterConfig::default())
}

fn finish(returns: &ReturnsPanel, spec: &DfmSpec, params: DfmParams, cfg: FilterConfig) -> Result<FittedModel> {
    let model = assemble_state_space(&params, spec)?;
    let filt = kalman_filter_with(&model, returns.returns(), None, &cfg)?;
    let smooth = kalman_smoother(&model, &filt)?;
    let n = spec.n;
    Ok(FittedModel {
        params,
        spec: *spec,
        loglik: filt.loglik,
        init_loglik: filt.loglik,
        std_errors: None,
        converged: true,
        stop_reason: StopReason::Gradient,
        iterations: 0,
        evaluations: 1,
        factors_filtered: filt.filt_mean.columns(0, n).into_owned(),
        factors_smoothed: smooth.smooth_mean.columns(0, n).into_owned(),
        dates: returns.dates().to_vec(),
        tickers: returns.tickers().to_vec(),
    })
}

/// Flattens parameters in the order beta (row-major), sigma, lambda
/// (lag-major, row-major), psi (lag-major).
pub fn flatten_params(params: &DfmParams) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..params.beta.nrows() {
        out.extend(params.beta.row(i).iter());
    }
    out.extend(params.sigma.iter());
    for l in &params.lambda {
        for i in 0..l.nrows() {
            out.extend(l.row(i).iter());
        }
    }
    for v in &params.psi {
        out.extend(v.iter());
    }
    out
}

fn unflatten(values: &[f64], spec: &DfmSpec) -> (DMatrix<f64>, DVector<f64>, Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
    let DfmSpec { n, p, q, s } = *spec;
    let mut it = values.iter().copied();
    let mut next = || it.next().unwrap_or(f64::NAN);
    let mut beta = DMatrix::zeros(s, n);
    for i in 0..s {
        for j in 0..n {
            beta[(i, j)] = next();
        }
    }
    let sigma = DVector::from_fn(s, |_, _| next());
    let mut lambda = Vec::with_capacity(p);
    for _ in 0..p {
        let mut l = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                l[(i, j)] = next();
            }
        }
        lambda.push(l);
    }
    let psi = (0..q).map(|_| DVector::from_fn(s, |_, _| next())).collect();
    (beta, sigma, lambda, psi)
}

/// Standard errors with default numerical settings.
pub fn standard_errors(fitted: &FittedModel, returns: &ReturnsPanel) -> Result<StdErrors> {
    standard_errors_with(fitted, returns, &FitOptions::default())
}

/// Inverse numerical Hessian of the negative log-likelihood in the packed
/// space, mapped to natural parameters through the Jacobian of `unpack`.
/// Coordinates touching a non-positive Hessian direction are reported as
/// `NaN`.
pub fn standard_errors_with(fitted: &FittedModel, returns: &ReturnsPanel, opts: &FitOptions) -> Result<StdErrors> {
    let spec = fitted.spec;
    check_panel(returns, &spec)?;
    let obj = NegLogLik { spec, obs: returns.returns(), cfg: opts.filter };
    let x = pack(&fitted.params)?;
    let k = x.len();
    let hess = numerical_hessian(&obj, &x, opts.hessian_step, opts.bfgs.parallelism)?;
    let eig = SymmetricEigen::try_new(hess, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("Hessian eigendecomposition did not converge".into()))?;
    let top = eig.eigenvalues.amax();
    let cut = 1e-10 * top.max(f64::MIN_POSITIVE);
    let mut cov = DMatrix::zeros(k, k);
    let mut weak = vec![0.0; k];
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(j);
        if lam > cut {
            cov.ger(1.0 / lam, &v, &v, 1.0);
        } else {
            for i in 0..k {
                weak[i] += v[i] * v[i];
            }
        }
    }
    let affected: Vec<bool> = weak.iter().map(|&w| w > 1e-6).collect();
    let hessian_ok = !affected.iter().any(|&a| a);
    if !hessian_ok {
        log::warn!(
            "Hessian is not positive definite; {} packed coordinates have no standard error",
            affected.iter().filter(|&&a| a).count()
        );
    }

    let base = flatten_params(&fitted.params);
    let m = base.len();
    let mut jac = DMatrix::zeros(m, k);
    for i in 0..k {
        let h = 1e-6 * x[i].abs().max(1.0);
        let mut xp = x.clone();
        xp[i] += h;
        let up = flatten_params(&unpack(&xp, &spec)?);
        xp[i] = x[i] - h;
        let down = flatten_params(&unpack(&xp, &spec)?);
        for r in 0..m {
            jac[(r, i)] = (up[r] - down[r]) / (2.0 * h);
        }
    }
    let nat_cov = &jac * cov * jac.transpose();
    let se: Vec<f64> = (0..m)
        .map(|r| {
            let touches = (0..k).any(|i| affected[i] && jac[(r, i)].abs() > 1e-12);
            if touches {
                f64::NAN
            } else {
                nat_cov[(r, r)].max(0.0).sqrt()
            }
        })
        .collect();
    let (beta, sigma, lambda, psi) = unflatten(&se, &spec);
    Ok(StdErrors { beta, sigma, lambda, psi, hessian_ok })
}

/// One row of the loadings table.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingRow {
    pub ticker: String,
    pub factor: usize,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
    pub significant: bool,
}

impl LoadingRow {
    /// `***` below 1%, `**` below 5%, `*` below 10%.
    pub fn stars(&self) -> &'static str {
        match self.p_value {
            p if p < 0.01 => "***",
            p if p < 0.05 => "**",
            p if p < 0.10 => "*",
            _ => "",
        }
    }
}

/// Loadings with z-statistics and two-sided normal p-values. Entries fixed
/// to zero by identification have `NaN` statistics.
pub fn loadings_table(fitted: &FittedModel) -> Vec<LoadingRow> {
    let normal = Normal::standard();
    let (s, n) = fitted.params.beta.shape();
    let mut rows = Vec::with_capacity(s * n);
    for i in 0..s {
        for j in 0..n {
            let estimate = fitted.params.beta[(i, j)];
            let std_error = fitted.std_errors.as_ref().map_or(f64::NAN, |e| e.beta[(i, j)]);
            let fixed = j > i;
            let z = if fixed || !(std_error > 0.0) { f64::NAN } else { estimate / std_error };
            let p_value = if z.is_nan() { f64::NAN } else { 2.0 * normal.sf(z.abs()) };
            rows.push(LoadingRow {
                ticker: fitted.tickers.get(i).cloned().unwrap_or_else(|| format!("S{i}")),
                factor: j + 1,
                estimate,
                std_error,
                z,
                p_value,
                significant: z.abs() > Z_CRITICAL,
            });
        }
    }
    rows
}
