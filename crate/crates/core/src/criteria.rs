//! Factor-count and lag-order selection.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimation::{fit_mle, FitOptions};
use crate::ingest::ReturnsPanel;
use crate::par::{map_indexed, Parallelism};
use crate::pca::residual_mse_curve;
use crate::statespace::DfmSpec;

/// Bai–Ng criteria for `n` factors given the residual mean square `v`, with
/// `big_n` series and `big_t` periods. Returns `[IC₁, IC₂, IC₃]`.
pub fn bai_ng(v: f64, n: usize, big_n: usize, big_t: usize) -> [f64; 3] {
    let (nn, tt) = (big_n as f64, big_t as f64);
    let k = n as f64;
    let min = nn.min(tt);
    let lv = v.ln();
    let ratio = (nn + tt) / (nn * tt);
    [
        lv + k * ratio * (nn * tt / (nn + tt)).ln(),
        lv + k * ratio * min.ln(),
        lv + k * min.ln() / min,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriteriaTable {
    pub n_series: usize,
    pub n_obs: usize,
    /// `V(n)` for `n = 0..=n_max`.
    pub v: Vec<f64>,
    pub ic1: Vec<f64>,
    pub ic2: Vec<f64>,
    pub ic3: Vec<f64>,
    /// Minimising `n` for IC₁, IC₂, IC₃.
    pub argmin: [usize; 3],
}

impl CriteriaTable {
    pub fn n_max(&self) -> usize {
        self.v.len() - 1
    }
}

fn argmin(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &v)| if v < best.1 { (i, v) } else { best })
        .0
}

/// IC₁–IC₃ for `n = 0..=n_max`, with `V(n)` the PCA residual mean square.
pub fn bai_ng_table(returns: &ReturnsPanel, n_max: usize) -> Result<CriteriaTable> {
    if n_max == 0 {
        return Err(Error::InvalidArgument("n_max must be at least 1".into()));
    }
    let (big_t, big_n) = returns.returns().shape();
    let v = residual_mse_curve(returns, n_max)?;
    if let Some(n) = v.iter().position(|&x| !(x > 0.0 && x.ln().is_finite())) {
        return Err(Error::Degenerate(format!("residual variance V({n}) is zero")));
    }
    let (mut ic1, mut ic2, mut ic3) = (Vec::new(), Vec::new(), Vec::new());
    for (n, &vn) in v.iter().enumerate() {
        let [a, b, c] = bai_ng(vn, n, big_n, big_t);
        ic1.push(a);
        ic2.push(b);
        ic3.push(c);
    }
    let argmin = [argmin(&ic1), argmin(&ic2), argmin(&ic3)];
    Ok(CriteriaTable { n_series: big_n, n_obs: big_t, v, ic1, ic2, ic3, argmin })
}

/// `−2·loglik + k·ln(t_obs)`.
pub fn bic(loglik: f64, k_params: usize, t_obs: usize) -> f64 {
    -2.0 * loglik + k_params as f64 * (t_obs.max(1) as f64).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub p: usize,
    pub q: usize,
    pub loglik: Option<f64>,
    pub bic: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderSelection {
    pub p: usize,
    pub q: usize,
    pub candidates: Vec<Candidate>,
}

/// Fits every `(p, q)` on the grid and keeps the smallest BIC. Failed fits are
/// recorded and skipped; ties go to the smaller `p + q`, then smaller `p`.
pub fn select_order(
    returns: &ReturnsPanel,
    n: usize,
    p_grid: &[usize],
    q_grid: &[usize],
    opts: &FitOptions,
    mode: Parallelism,
) -> Result<OrderSelection> {
    if p_grid.is_empty() || q_grid.is_empty() {
        return Err(Error::InvalidArgument("order grids must be nonempty".into()));
    }
    let grid: Vec<(usize, usize)> = p_grid.iter().flat_map(|&p| q_grid.iter().map(move |&q| (p, q))).collect();
    let mut inner = opts.clone();
    inner.std_errors = false;
    if mode.is_parallel() && grid.len() > 1 {
        inner.bfgs.parallelism = Parallelism::Sequential;
    }
    let t_obs = returns.n_obs();
    let candidates = map_indexed(
        grid.len(),
        mode,
        || (),
        |_, i| {
            let (p, q) = grid[i];
            let outcome = DfmSpec::new(n, p, q, returns.n_series()).and_then(|spec| fit_mle(returns, &spec, &inner));
            match outcome {
                Ok(fit) => Candidate {
                    p,
                    q,
                    loglik: Some(fit.loglik),
                    bic: Some(bic(fit.loglik, fit.spec.bic_param_count(), t_obs)),
                    converged: fit.converged,
                    error: None,
                },
                Err(e) => {
                    log::warn!("order (p={p}, q={q}) skipped: {e}");
                    Candidate { p, q, loglik: None, bic: None, converged: false, error: Some(e.to_string()) }
                }
            }
        },
    );
    let best = candidates
        .iter()
        .filter_map(|c| c.bic.map(|b| (b, c.p + c.q, c.p, c.q)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
        .ok_or_else(|| Error::Numerical("every candidate fit failed".into()))?;
    Ok(OrderSelection { p: best.2, q: best.3, candidates })
}
