//! Synthetic panels drawn from known model parameters.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ingest::{weekdays_from, ReturnsPanel};
use crate::statespace::{check_stationarity, DfmParams, DfmSpec};

pub const DEFAULT_BURN_IN: usize = 500;

/// First date of simulated panels.
pub fn sim_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date")
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    /// Uncentered simulated returns on consecutive weekdays.
    pub returns: ReturnsPanel,
    /// `T × n` factor path.
    pub true_factors: DMatrix<f64>,
    /// `T × S` unit-innovation idiosyncratic paths `Z`.
    pub true_idio: DMatrix<f64>,
    pub seed: u64,
}

/// Draws `t_obs` periods after discarding `burn_in` periods started from zero.
/// Innovations are standard normal, drawn per period as `n` factor shocks
/// followed by `S` idiosyncratic shocks.
pub fn simulate_dfm(params: &DfmParams, spec: &DfmSpec, t_obs: usize, seed: u64, burn_in: usize) -> Result<SimOutput> {
    params.check_shape(spec)?;
    if params.sigma.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument("sigma must be finite and nonnegative".into()));
    }
    let report = check_stationarity(params)?;
    if !report.stationary {
        return Err(Error::NonStationary(format!(
            "factor radius {:.6}, idiosyncratic radius {:.6}",
            report.factor_radius, report.idio_radius
        )));
    }
    let DfmSpec { n, p, q, s } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = burn_in + t_obs;
    // Ring buffers of past values, most recent first.
    let mut f_hist: Vec<DVector<f64>> = vec![DVector::zeros(n); p];
    let mut z_hist: Vec<DVector<f64>> = vec![DVector::zeros(s); q];
    let mut factors = DMatrix::zeros(t_obs, n);
    let mut idio = DMatrix::zeros(t_obs, s);

    for t in 0..total {
        let mut f = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        for (lam, past) in params.lambda.iter().zip(&f_hist) {
            f.gemv(1.0, lam, past, 1.0);
        }
        let mut z = DVector::from_fn(s, |_, _| StandardNormal.sample(&mut rng));
        for (psi, past) in params.psi.iter().zip(&z_hist) {
            z += psi.component_mul(past);
        }
        if p > 0 {
            f_hist.rotate_right(1);
            f_hist[0].copy_from(&f);
        }
        if q > 0 {
            z_hist.rotate_right(1);
            z_hist[0].copy_from(&z);
        }
        if t >= burn_in {
            let r = t - burn_in;
            factors.row_mut(r).copy_from(&f.transpose());
            idio.row_mut(r).copy_from(&z.transpose());
        }
    }

    let returns = reconstruct(params, &factors, &idio);
    let dates = weekdays_from(sim_start_date(), t_obs);
    let tickers = (1..=s).map(|i| format!("S{i:02}")).collect();
    Ok(SimOutput { returns: ReturnsPanel::from_grid(dates, tickers, returns)?, true_factors: factors, true_idio: idio, seed })
}

/// `R = F βᵀ + Z diag(σ)`.
pub fn reconstruct(params: &DfmParams, factors: &DMatrix<f64>, idio: &DMatrix<f64>) -> DMatrix<f64> {
    let mut r = factors * params.beta.transpose();
    for (i, mut col) in r.column_iter_mut().enumerate() {
        col.axpy(params.sigma[i], &idio.column(i), 1.0);
    }
    r
}
