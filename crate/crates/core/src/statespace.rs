//! Dynamic factor model parameters and their companion-form state space.
//!
//! ```text
//! R_it = β_iᵀ F_t + σ_i Z_it
//! F_t  = Λ_1 F_{t−1} + … + Λ_p F_{t−p} + ε_t,     ε_t ~ N(0, I_n)
//! Z_it = ψ_i1 Z_i(t−1) + … + ψ_iq Z_i(t−q) + γ_it, γ_it ~ N(0, 1)
//! ```
//!
//! The state stacks `[F_t, …, F_{t−p+1}, Z̃_t, …, Z̃_{t−r+1}]` with
//! `Z̃_it = σ_i Z_it` and `r = max(q, 1)`, so `d = n·p + S·r`. The
//! measurement equation carries no noise.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, STATIONARITY_MARGIN};

/// Model orders and panel width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DfmSpec {
    /// Number of common factors.
    pub n: usize,
    /// Factor VAR order.
    pub p: usize,
    /// Idiosyncratic AR order (0 means white idiosyncratic noise).
    pub q: usize,
    /// Number of series.
    pub s: usize,
}

impl DfmSpec {
    pub fn new(n: usize, p: usize, q: usize, s: usize) -> Result<Self> {
        let spec = Self { n, p, q, s };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.s == 0 {
            return Err(Error::InvalidArgument(format!(
                "need n >= 1, p >= 1, S >= 1 (got n={}, p={}, S={})",
                self.n, self.p, self.s
            )));
        }
        Ok(())
    }

    /// Number of idiosyncratic lag blocks kept in the state.
    pub fn idio_lags(&self) -> usize {
        self.q.max(1)
    }

    pub fn factor_dim(&self) -> usize {
        self.n * self.p
    }

    pub fn state_dim(&self) -> usize {
        self.factor_dim() + self.s * self.idio_lags()
    }

    /// Parameter count used by BIC: loadings, idiosyncratic scales, VAR
    /// coefficients and AR coefficients.
    pub fn bic_param_count(&self) -> usize {
        self.s * self.n + self.s + self.n * self.n * self.p + self.s * self.q
    }
}

/// All estimable quantities of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct DfmParams {
    /// `S × n` loadings.
    pub beta: DMatrix<f64>,
    /// Idiosyncratic scales, one per series.
    pub sigma: DVector<f64>,
    /// `p` factor VAR matrices, each `n × n`.
    pub lambda: Vec<DMatrix<f64>>,
    /// `q` diagonals; `psi[j][i]` is the lag-`j+1` AR coefficient of series `i`.
    pub psi: Vec<DVector<f64>>,
}

impl DfmParams {
    /// Orders implied by the array shapes.
    pub fn spec(&self) -> DfmSpec {
        DfmSpec { n: self.beta.ncols(), p: self.lambda.len(), q: self.psi.len(), s: self.beta.nrows() }
    }

    pub fn check_shape(&self, spec: &DfmSpec) -> Result<()> {
        spec.validate()?;
        let bad = |what: &str| Err(Error::Dimension(format!("{what} does not match {spec:?}")));
        if self.beta.shape() != (spec.s, spec.n) {
            return bad("beta");
        }
        if self.sigma.len() != spec.s {
            return bad("sigma");
        }
        if self.lambda.len() != spec.p || self.lambda.iter().any(|m| m.shape() != (spec.n, spec.n)) {
            return bad("lambda");
        }
        if self.psi.len() != spec.q || self.psi.iter().any(|v| v.len() != spec.s) {
            return bad("psi");
        }
        Ok(())
    }

    /// AR coefficients of series `i`, lag 1 first.
    pub fn psi_of(&self, i: usize) -> Vec<f64> {
        self.psi.iter().map(|v| v[i]).collect()
    }

    /// True when the top `n × n` block of `beta` is lower triangular with a
    /// nonnegative diagonal.
    pub fn is_identified(&self) -> bool {
        let n = self.beta.ncols();
        if self.beta.nrows() < n {
            return false;
        }
        (0..n).all(|i| self.beta[(i, i)] >= 0.0 && ((i + 1)..n).all(|j| self.beta[(i, j)] == 0.0))
    }

    pub fn to_json(&self, tickers: Option<&[String]>) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ParamsFile::from_params(self, tickers))?)
    }

    pub fn from_json(text: &str) -> Result<(Self, Option<Vec<String>>)> {
        let file: ParamsFile = serde_json::from_str(text)?;
        file.into_params()
    }

    pub fn save(&self, path: impl AsRef<Path>, tickers: Option<&[String]>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json(tickers)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<Vec<String>>)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// JSON layout of a parameter file. Grids are row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsFile {
    pub spec: DfmSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tickers: Option<Vec<String>>,
    pub beta: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    pub lambda: Vec<Vec<Vec<f64>>>,
    pub psi: Vec<Vec<f64>>,
}

pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn grid_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("{what} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl ParamsFile {
    pub fn from_params(params: &DfmParams, tickers: Option<&[String]>) -> Self {
        Self {
            spec: params.spec(),
            tickers: tickers.map(|t| t.to_vec()),
            beta: rows_of(&params.beta),
            sigma: params.sigma.iter().copied().collect(),
            lambda: params.lambda.iter().map(rows_of).collect(),
            psi: params.psi.iter().map(|v| v.iter().copied().collect()).collect(),
        }
    }

    pub fn into_params(self) -> Result<(DfmParams, Option<Vec<String>>)> {
        let spec = self.spec;
        spec.validate()?;
        let beta = grid_from_rows(&self.beta, spec.s, spec.n, "beta")?;
        if self.sigma.len() != spec.s {
            return Err(Error::Dimension("sigma length".into()));
        }
        if self.lambda.len() != spec.p || self.psi.len() != spec.q {
            return Err(Error::Dimension("lambda/psi lag counts".into()));
        }
        let lambda = self
            .lambda
            .iter()
            .map(|g| grid_from_rows(g, spec.n, spec.n, "lambda"))
            .collect::<Result<Vec<_>>>()?;
        let psi = self
            .psi
            .iter()
            .map(|v| {
                if v.len() != spec.s {
                    return Err(Error::Dimension("psi diagonal length".into()));
                }
                Ok(DVector::from_vec(v.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(t) = &self.tickers {
            if t.len() != spec.s {
                return Err(Error::Dimension("ticker count".into()));
            }
        }
        let params = DfmParams { beta, sigma: DVector::from_vec(self.sigma), lambda, psi };
        Ok((params, self.tickers))
    }
}

/// Linear Gaussian state space `Y_t = M X_t + ε_t`, `X_t = T X_{t−1} + η_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    /// `S × d` measurement matrix `M`.
    pub measure: DMatrix<f64>,
    /// `d × d` transition matrix `T`.
    pub transit: DMatrix<f64>,
    /// `S × S` measurement noise covariance `Σ_ε`.
    pub measure_noise: DMatrix<f64>,
    /// `d × d` state noise covariance `Σ_η`.
    pub state_noise: DMatrix<f64>,
}

impl StateSpaceModel {
    pub fn new(
        measure: DMatrix<f64>,
        transit: DMatrix<f64>,
        measure_noise: DMatrix<f64>,
        state_noise: DMatrix<f64>,
    ) -> Result<Self> {
        let (s, d) = measure.shape();
        if transit.shape() != (d, d) || state_noise.shape() != (d, d) || measure_noise.shape() != (s, s) {
            return Err(Error::Dimension("state-space matrices have inconsistent shapes".into()));
        }
        Ok(Self { measure, transit, measure_noise, state_noise })
    }

    pub fn state_dim(&self) -> usize {
        self.transit.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.measure.nrows()
    }
}

/// Builds `M`, `T`, `Σ_ε = 0` and `Σ_η = diag(I_n, 0, …, σ², 0, …)`.
pub fn assemble_state_space(params: &DfmParams, spec: &DfmSpec) -> Result<StateSpaceModel> {
    params.check_shape(spec)?;
    let DfmSpec { n, p, q, s } = *spec;
    let r = spec.idio_lags();
    let fd = spec.factor_dim();
    let d = spec.state_dim();

    let mut measure = DMatrix::zeros(s, d);
    measure.view_mut((0, 0), (s, n)).copy_from(&params.beta);
    for i in 0..s {
        measure[(i, fd + i)] = 1.0;
    }

    let mut transit = DMatrix::zeros(d, d);
    for (j, lam) in params.lambda.iter().enumerate() {
        transit.view_mut((0, j * n), (n, n)).copy_from(lam);
    }
    for k in 1..p {
        for a in 0..n {
            transit[(k * n + a, (k - 1) * n + a)] = 1.0;
        }
    }
    for (j, diag) in params.psi.iter().enumerate() {
        for i in 0..s {
            transit[(fd + i, fd + j * s + i)] = diag[i];
        }
    }
    for k in 1..r {
        for i in 0..s {
            transit[(fd + k * s + i, fd + (k - 1) * s + i)] = 1.0;
        }
    }
    debug_assert!(q <= r);

    let mut state_noise = DMatrix::zeros(d, d);
    for a in 0..n {
        state_noise[(a, a)] = 1.0;
    }
    for i in 0..s {
        state_noise[(fd + i, fd + i)] = params.sigma[i] * params.sigma[i];
    }

    Ok(StateSpaceModel { measure, transit, measure_noise: DMatrix::zeros(s, s), state_noise })
}

/// Reads the parameters back out of an assembled model.
pub fn disassemble_state_space(model: &StateSpaceModel, spec: &DfmSpec) -> Result<DfmParams> {
    spec.validate()?;
    let DfmSpec { n, p, q, s } = *spec;
    let fd = spec.factor_dim();
    if model.state_dim() != spec.state_dim() || model.obs_dim() != s {
        return Err(Error::Dimension("model does not match spec".into()));
    }
    let beta = model.measure.view((0, 0), (s, n)).into_owned();
    let sigma = DVector::from_fn(s, |i, _| model.state_noise[(fd + i, fd + i)].sqrt());
    let lambda = (0..p).map(|j| model.transit.view((0, j * n), (n, n)).into_owned()).collect();
    let psi = (0..q).map(|j| DVector::from_fn(s, |i, _| model.transit[(fd + i, fd + j * s + i)])).collect();
    Ok(DfmParams { beta, sigma, lambda, psi })
}

/// Unique solution of `P = T P Tᵀ + Σ_η`.
pub fn stationary_state_covariance(model: &StateSpaceModel) -> Result<DMatrix<f64>> {
    linalg::discrete_lyapunov(&model.transit, &model.state_noise)
}

/// Companion matrix of a VAR with the given lag matrices (all `n × n`).
pub fn var_companion(lags: &[DMatrix<f64>]) -> DMatrix<f64> {
    let p = lags.len();
    if p == 0 {
        return DMatrix::zeros(0, 0);
    }
    let n = lags[0].nrows();
    let mut c = DMatrix::zeros(n * p, n * p);
    for (j, lam) in lags.iter().enumerate() {
        c.view_mut((0, j * n), (n, n)).copy_from(lam);
    }
    for k in 1..p {
        for a in 0..n {
            c[(k * n + a, (k - 1) * n + a)] = 1.0;
        }
    }
    c
}

/// Companion matrix of a scalar AR polynomial.
pub fn ar_companion(coeffs: &[f64]) -> DMatrix<f64> {
    let lags: Vec<DMatrix<f64>> = coeffs.iter().map(|&c| DMatrix::from_element(1, 1, c)).collect();
    var_companion(&lags)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationarityReport {
    /// Spectral radius of the factor VAR companion matrix.
    pub factor_radius: f64,
    /// Largest spectral radius over the idiosyncratic AR companions.
    pub idio_radius: f64,
    pub stationary: bool,
}

pub fn check_stationarity(params: &DfmParams) -> Result<StationarityReport> {
    let factor_radius = linalg::spectral_radius(&var_companion(&params.lambda))?;
    let mut idio_radius = 0.0_f64;
    for i in 0..params.beta.nrows() {
        idio_radius = idio_radius.max(linalg::spectral_radius(&ar_companion(&params.psi_of(i)))?);
    }
    let stationary = factor_radius < 1.0 - STATIONARITY_MARGIN && idio_radius < 1.0 - STATIONARITY_MARGIN;
    Ok(StationarityReport { factor_radius, idio_radius, stationary })
}

/// Stationary covariance `Σ_F` of the current factor vector.
pub fn factor_covariance(params: &DfmParams) -> Result<DMatrix<f64>> {
    let n = params.beta.ncols();
    let c = var_companion(&params.lambda);
    let mut q = DMatrix::zeros(c.nrows(), c.nrows());
    q.view_mut((0, 0), (n, n)).fill_with_identity();
    let p = linalg::discrete_lyapunov(&c, &q)?;
    Ok(p.view((0, 0), (n, n)).into_owned())
}

/// Stationary variance of a unit-innovation AR process.
pub fn ar_unit_variance(coeffs: &[f64]) -> Result<f64> {
    if coeffs.is_empty() {
        return Ok(1.0);
    }
    let c = ar_companion(coeffs);
    let mut q = DMatrix::zeros(c.nrows(), c.nrows());
    q[(0, 0)] = 1.0;
    Ok(linalg::discrete_lyapunov(&c, &q)?[(0, 0)])
}

/// Per-series `Var(R_it) = β_iᵀ Σ_F β_i + σ_i² σ_Zi²`.
pub fn implied_return_variance(params: &DfmParams) -> Result<DVector<f64>> {
    let report = check_stationarity(params)?;
    if !report.stationary {
        return Err(Error::NonStationary(format!(
            "factor radius {:.6}, idiosyncratic radius {:.6}",
            report.factor_radius, report.idio_radius
        )));
    }
    let sigma_f = factor_covariance(params)?;
    let s = params.beta.nrows();
    let mut out = DVector::zeros(s);
    for i in 0..s {
        let b = params.beta.row(i).transpose();
        let common = (b.transpose() * &sigma_f * &b)[(0, 0)];
        out[i] = common + params.sigma[i].powi(2) * ar_unit_variance(&params.psi_of(i))?;
    }
    Ok(out)
}
