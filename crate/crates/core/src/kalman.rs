//! Kalman filter, fixed-interval smoother and Gaussian log-likelihood.
//!
//! Observations are a `T × S` grid with `NaN` marking missing entries. Rows of
//! `M` for missing entries are dropped before the update; a fully missing row
//! skips the update and contributes nothing to the likelihood.
//!
//! The covariance update uses the Joseph form
//! `(I − KM) Σ (I − KM)ᵀ + K Σ_ε Kᵀ`, evaluated as
//! `Σ − KMΣ − (KMΣ)ᵀ + K F Kᵀ` with `F` the (possibly jittered) innovation
//! covariance, and every reported covariance is exactly symmetrised.
//!
//! Once the predicted covariance stops changing (relative max-norm change at
//! most [`FilterConfig::steady_state_tol`]) on fully observed rows, the gain
//! and covariances are frozen and only the means are propagated. Any missing
//! entry drops the filter back to the full recursion.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::{self, cholesky_with_jitter, symmetrize};
use crate::statespace::{stationary_state_covariance, StateSpaceModel};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Variance used for the diffuse fallback prior.
pub const DIFFUSE_VARIANCE: f64 = 1e7;

/// Gaussian prior for the state before the first observation.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDensity {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Zero mean with the stationary covariance, or a diffuse `10⁷·I` prior when
/// the transition is not stable.
pub fn default_initial_state(model: &StateSpaceModel) -> StateDensity {
    let d = model.state_dim();
    let cov = match stationary_state_covariance(model) {
        Ok(p) => p,
        Err(e) => {
            log::debug!("falling back to diffuse prior: {e}");
            DMatrix::identity(d, d) * DIFFUSE_VARIANCE
        }
    };
    StateDensity { mean: DVector::zeros(d), cov }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Relative tolerance for switching to the steady-state gain; `None`
    /// always runs the full covariance recursion.
    pub steady_state_tol: Option<f64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { steady_state_tol: Some(1e-14) }
    }
}

impl FilterConfig {
    pub fn exact() -> Self {
        Self { steady_state_tol: None }
    }
}

#[derive(Debug, Clone)]
pub struct FilterResult {
    /// `T × d` one-step-ahead means `μ_{t|t−1}`.
    pub pred_mean: DMatrix<f64>,
    /// Predicted covariances `Σ_{t|t−1}`.
    pub pred_cov: Vec<DMatrix<f64>>,
    /// `T × d` filtered means `μ_{t|t}`.
    pub filt_mean: DMatrix<f64>,
    /// Filtered covariances `Σ_{t|t}`.
    pub filt_cov: Vec<DMatrix<f64>>,
    pub loglik_terms: Vec<f64>,
    pub loglik: f64,
}

#[derive(Debug, Clone)]
pub struct SmootherResult {
    /// `T × d` smoothed means `μ_{t|T}`.
    pub smooth_mean: DMatrix<f64>,
    /// Smoothed covariances `Σ_{t|T}`.
    pub smooth_cov: Vec<DMatrix<f64>>,
}

/// Row-compressed view of a mostly-zero matrix.
#[derive(Debug, Clone)]
struct SparseRows {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    fn from_dense(m: &DMatrix<f64>) -> Self {
        let rows = (0..m.nrows())
            .map(|i| (0..m.ncols()).filter(|&j| m[(i, j)] != 0.0).map(|j| (j, m[(i, j)])).collect())
            .collect();
        Self { rows }
    }

    /// `out = self[rows] · dense`.
    fn mul_rows_into(&self, rows: &[usize], dense: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        for j in 0..dense.ncols() {
            let col = dense.column(j);
            for (a, &r) in rows.iter().enumerate() {
                out[(a, j)] = self.rows[r].iter().map(|&(k, v)| v * col[k]).sum();
            }
        }
    }

    fn mul_into(&self, dense: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        for j in 0..dense.ncols() {
            let col = dense.column(j);
            for (i, row) in self.rows.iter().enumerate() {
                out[(i, j)] = row.iter().map(|&(k, v)| v * col[k]).sum();
            }
        }
    }

    fn mul_vec_into(&self, v: &DVector<f64>, out: &mut DVector<f64>) {
        for (i, row) in self.rows.iter().enumerate() {
            out[i] = row.iter().map(|&(k, c)| c * v[k]).sum();
        }
    }
}

/// Frozen quantities once the covariance recursion has converged.
struct Steady {
    kt: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
    p_filt: DMatrix<f64>,
    p_pred: DMatrix<f64>,
}

/// Reusable buffers for repeated likelihood evaluations on models with the
/// same dimensions.
#[derive(Debug, Clone)]
pub struct KalmanWorkspace {
    d: usize,
    s: usize,
    tp: DMatrix<f64>,
    mu: DVector<f64>,
    mu_next: DVector<f64>,
    resid: DVector<f64>,
    my: DVector<f64>,
}

impl KalmanWorkspace {
    pub fn new(state_dim: usize, obs_dim: usize) -> Self {
        let d = state_dim;
        Self {
            d,
            s: obs_dim,
            tp: DMatrix::zeros(d, d),
            mu: DVector::zeros(d),
            mu_next: DVector::zeros(d),
            resid: DVector::zeros(obs_dim),
            my: DVector::zeros(obs_dim),
        }
    }

    fn fit(&mut self, model: &StateSpaceModel) {
        if self.d != model.state_dim() || self.s != model.obs_dim() {
            *self = Self::new(model.state_dim(), model.obs_dim());
        }
    }

    /// Log-likelihood only, without storing per-step output.
    pub fn log_likelihood(
        &mut self,
        model: &StateSpaceModel,
        obs: &DMatrix<f64>,
        init: Option<&StateDensity>,
        cfg: &FilterConfig,
    ) -> Result<f64> {
        self.fit(model);
        run(model, obs, init, cfg, self, None)
    }
}

struct Recorder {
    pred_mean: DMatrix<f64>,
    pred_cov: Vec<DMatrix<f64>>,
    filt_mean: DMatrix<f64>,
    filt_cov: Vec<DMatrix<f64>>,
    terms: Vec<f64>,
}

fn validate(model: &StateSpaceModel, obs: &DMatrix<f64>, init: Option<&StateDensity>) -> Result<()> {
    if obs.ncols() != model.obs_dim() {
        return Err(Error::Dimension(format!(
            "observations have {} columns, model expects {}",
            obs.ncols(),
            model.obs_dim()
        )));
    }
    if obs.iter().any(|v| v.is_infinite()) {
        return Err(Error::Data("observations contain infinite values".into()));
    }
    let mats = [&model.measure, &model.transit, &model.measure_noise, &model.state_noise];
    if mats.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("model matrices contain non-finite values".into()));
    }
    if let Some(init) = init {
        let d = model.state_dim();
        if init.mean.len() != d || init.cov.shape() != (d, d) {
            return Err(Error::Dimension("initial state does not match the state dimension".into()));
        }
    }
    Ok(())
}

/// Prediction step `P ← T P Tᵀ + Σ_η`.
fn predict_cov(t: &SparseRows, q: &DMatrix<f64>, p: &DMatrix<f64>, tp: &mut DMatrix<f64>, out: &mut DMatrix<f64>) {
    t.mul_into(p, tp);
    tp.transpose_to(out);
    let ptt = out.clone_owned();
    t.mul_into(&ptt, out);
    *out += q;
    symmetrize(out);
}

struct Update {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    term: f64,
    frozen: Option<(DMatrix<f64>, Cholesky<f64, Dyn>, f64)>,
}

fn update(
    model: &StateSpaceModel,
    m: &SparseRows,
    y: &[f64],
    mu: &DVector<f64>,
    p: &DMatrix<f64>,
) -> Result<Update> {
    let idx: Vec<usize> = (0..y.len()).filter(|&i| !y[i].is_nan()).collect();
    let k = idx.len();
    if k == 0 {
        return Ok(Update { mean: mu.clone(), cov: p.clone(), term: 0.0, frozen: None });
    }
    let d = p.nrows();
    let mut mp = DMatrix::zeros(k, d);
    m.mul_rows_into(&idx, p, &mut mp);
    let mut f = DMatrix::zeros(k, k);
    for b in 0..k {
        for a in 0..k {
            f[(a, b)] = m.rows[idx[b]].iter().map(|&(c, v)| v * mp[(a, c)]).sum::<f64>()
                + model.measure_noise[(idx[a], idx[b])];
        }
    }
    symmetrize(&mut f);
    let (chol, _) = cholesky_with_jitter(&f)?;
    let innov = DVector::from_fn(k, |a, _| y[idx[a]] - m.rows[idx[a]].iter().map(|&(c, v)| v * mu[c]).sum::<f64>());

    let l = chol.l();
    let logdet: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let w = l
        .solve_lower_triangular(&innov)
        .ok_or_else(|| Error::Numerical("singular innovation factor".into()))?;
    let term = -0.5 * (k as f64 * LN_2PI + logdet + w.norm_squared());

    // Kᵀ = F⁻¹ M Σ
    let kt = chol.solve(&mp);
    let mut mean = mu.clone();
    mean.gemv_tr(1.0, &kt, &innov, 1.0);

    let a = kt.tr_mul(&mp);
    let g = l.tr_mul(&kt);
    let mut cov = p - &a - a.transpose() + g.tr_mul(&g);
    symmetrize(&mut cov);

    let frozen = if k == y.len() { Some((kt, chol, logdet)) } else { None };
    Ok(Update { mean, cov, term, frozen })
}

fn rel_change(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = linalg::max_abs(b).max(f64::MIN_POSITIVE);
    a.iter().zip(b.iter()).fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs())) / scale
}

fn run(
    model: &StateSpaceModel,
    obs: &DMatrix<f64>,
    init: Option<&StateDensity>,
    cfg: &FilterConfig,
    ws: &mut KalmanWorkspace,
    mut rec: Option<&mut Recorder>,
) -> Result<f64> {
    validate(model, obs, init)?;
    let n_t = obs.nrows();
    if n_t == 0 {
        return Ok(0.0);
    }
    let s = model.obs_dim();
    let t_sparse = SparseRows::from_dense(&model.transit);
    let m_sparse = SparseRows::from_dense(&model.measure);
    let owned_init;
    let init = match init {
        Some(i) => i,
        None => {
            owned_init = default_initial_state(model);
            &owned_init
        }
    };

    t_sparse.mul_vec_into(&init.mean, &mut ws.mu);
    let mut p_pred = DMatrix::zeros(ws.d, ws.d);
    predict_cov(&t_sparse, &model.state_noise, &init.cov, &mut ws.tp, &mut p_pred);

    let mut steady: Option<Steady> = None;
    let mut loglik = 0.0;
    let mut y = vec![0.0; s];

    for t in 0..n_t {
        for (j, yj) in y.iter_mut().enumerate() {
            *yj = obs[(t, j)];
        }
        let complete = y.iter().all(|v| !v.is_nan());
        if let Some(r) = rec.as_deref_mut() {
            r.pred_mean.row_mut(t).copy_from(&ws.mu.transpose());
            r.pred_cov.push(p_pred.clone());
        }

        let term;
        match steady.as_ref().filter(|_| complete) {
            Some(st) => {
                m_sparse.mul_vec_into(&ws.mu, &mut ws.my);
                for j in 0..s {
                    ws.resid[j] = y[j] - ws.my[j];
                }
                ws.mu_next.copy_from(&ws.mu);
                ws.mu_next.gemv_tr(1.0, &st.kt, &ws.resid, 1.0);
                st.chol.l_dirty().solve_lower_triangular_mut(&mut ws.resid);
                term = -0.5 * (s as f64 * LN_2PI + st.logdet + ws.resid.norm_squared());
                if let Some(r) = rec.as_deref_mut() {
                    r.filt_mean.row_mut(t).copy_from(&ws.mu_next.transpose());
                    r.filt_cov.push(st.p_filt.clone());
                }
                t_sparse.mul_vec_into(&ws.mu_next, &mut ws.mu);
            }
            None => {
                steady = None;
                let up = update(model, &m_sparse, &y, &ws.mu, &p_pred)?;
                term = up.term;
                if let Some(r) = rec.as_deref_mut() {
                    r.filt_mean.row_mut(t).copy_from(&up.mean.transpose());
                    r.filt_cov.push(up.cov.clone());
                }
                t_sparse.mul_vec_into(&up.mean, &mut ws.mu);
                let mut next = DMatrix::zeros(ws.d, ws.d);
                predict_cov(&t_sparse, &model.state_noise, &up.cov, &mut ws.tp, &mut next);
                if let (Some(tol), Some((kt, chol, logdet))) = (cfg.steady_state_tol, up.frozen) {
                    if rel_change(&next, &p_pred) <= tol {
                        steady = Some(Steady { kt, chol, logdet, p_filt: up.cov, p_pred: next.clone() });
                    }
                }
                p_pred = next;
            }
        }
        if !term.is_finite() {
            return Err(Error::Numerical(format!("non-finite log-likelihood contribution at t={t}")));
        }
        loglik += term;
        if let Some(r) = rec.as_deref_mut() {
            r.terms.push(term);
        }
        if let Some(st) = steady.as_ref() {
            p_pred.copy_from(&st.p_pred);
        }
    }
    Ok(loglik)
}

/// Runs the filter with the default configuration.
pub fn kalman_filter(model: &StateSpaceModel, obs: &DMatrix<f64>, init: Option<&StateDensity>) -> Result<FilterResult> {
    kalman_filter_with(model, obs, init, &FilterConfig::default())
}

pub fn kalman_filter_with(
    model: &StateSpaceModel,
    obs: &DMatrix<f64>,
    init: Option<&StateDensity>,
    cfg: &FilterConfig,
) -> Result<FilterResult> {
    let (n_t, d) = (obs.nrows(), model.state_dim());
    let mut rec = Recorder {
        pred_mean: DMatrix::zeros(n_t, d),
        pred_cov: Vec::with_capacity(n_t),
        filt_mean: DMatrix::zeros(n_t, d),
        filt_cov: Vec::with_capacity(n_t),
        terms: Vec::with_capacity(n_t),
    };
    let mut ws = KalmanWorkspace::new(d, model.obs_dim());
    let loglik = run(model, obs, init, cfg, &mut ws, Some(&mut rec))?;
    Ok(FilterResult {
        pred_mean: rec.pred_mean,
        pred_cov: rec.pred_cov,
        filt_mean: rec.filt_mean,
        filt_cov: rec.filt_cov,
        loglik_terms: rec.terms,
        loglik,
    })
}

/// Gaussian log-likelihood by prediction-error decomposition.
pub fn log_likelihood(model: &StateSpaceModel, obs: &DMatrix<f64>, init: Option<&StateDensity>) -> Result<f64> {
    KalmanWorkspace::new(model.state_dim(), model.obs_dim()).log_likelihood(model, obs, init, &FilterConfig::default())
}

/// Relative eigenvalue cut-off for the pseudo-inverse of `Σ_{t+1|t}`.
pub const SMOOTHER_PINV_TOL: f64 = 1e-10;

/// Backward recursion with `J_t = Σ_{t|t} Tᵀ Σ_{t+1|t}⁺`.
pub fn kalman_smoother(model: &StateSpaceModel, filt: &FilterResult) -> Result<SmootherResult> {
    let n_t = filt.filt_mean.nrows();
    let d = model.state_dim();
    if filt.filt_mean.ncols() != d || filt.filt_cov.len() != n_t || filt.pred_cov.len() != n_t {
        return Err(Error::Dimension("filter output does not match the model".into()));
    }
    let mut smooth_mean = filt.filt_mean.clone();
    let mut smooth_cov = filt.filt_cov.clone();
    if n_t < 2 {
        return Ok(SmootherResult { smooth_mean, smooth_cov });
    }
    let t_sparse = SparseRows::from_dense(&model.transit);
    let mut tp = DMatrix::zeros(d, d);
    let mut cached: Option<(usize, DMatrix<f64>)> = None;

    for t in (0..n_t - 1).rev() {
        let p_f = &filt.filt_cov[t];
        let p_next = &filt.pred_cov[t + 1];
        let reuse = cached
            .as_ref()
            .is_some_and(|(s, _)| filt.filt_cov[*s] == *p_f && filt.pred_cov[*s + 1] == *p_next);
        if !reuse {
            // Σ_{t|t} Tᵀ = (T Σ_{t|t})ᵀ since Σ_{t|t} is symmetric.
            t_sparse.mul_into(p_f, &mut tp);
            let gain = tp.transpose() * linalg::pinv_symmetric(p_next, SMOOTHER_PINV_TOL)?;
            cached = Some((t, gain));
        }
        let j = &cached.as_ref().expect("gain computed above").1;

        let dm = smooth_mean.row(t + 1).transpose() - filt.pred_mean.row(t + 1).transpose();
        let mean = filt.filt_mean.row(t).transpose() + j * dm;
        smooth_mean.row_mut(t).copy_from(&mean.transpose());

        let mut cov = p_f + j * (&smooth_cov[t + 1] - p_next) * j.transpose();
        symmetrize(&mut cov);
        smooth_cov[t] = cov;
    }
    Ok(SmootherResult { smooth_mean, smooth_cov })
}
