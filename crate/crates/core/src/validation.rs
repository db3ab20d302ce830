//! CAPM betas, correlations and OLS diagnostics for comparing estimated
//! factors with an index and with principal components.

use std::collections::HashMap;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ingest::ReturnsPanel;
use crate::linalg::least_squares;

/// A single dated series such as index returns.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketSeries {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

impl MarketSeries {
    pub fn new(dates: Vec<NaiveDate>, values: Vec<f64>) -> Result<Self> {
        if dates.len() != values.len() {
            return Err(Error::Dimension(format!("{} dates for {} values", dates.len(), values.len())));
        }
        Ok(Self { dates, values })
    }

    /// Takes one column of a returns panel, undoing any centering.
    pub fn from_panel_column(panel: &ReturnsPanel, col: usize) -> Result<Self> {
        if col >= panel.n_series() {
            return Err(Error::InvalidArgument(format!("column {col} out of range")));
        }
        let raw = panel.decentered();
        Self::new(panel.dates().to_vec(), raw.column(col).iter().copied().collect())
    }

    /// Values on `dates`, `NaN` where this series has no entry.
    pub fn aligned_to(&self, dates: &[NaiveDate]) -> Vec<f64> {
        let lookup: HashMap<NaiveDate, f64> = self.dates.iter().copied().zip(self.values.iter().copied()).collect();
        dates.iter().map(|d| lookup.get(d).copied().unwrap_or(f64::NAN)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapmResult {
    pub tickers: Vec<String>,
    pub betas: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub r_squared: Vec<f64>,
    pub n_obs: Vec<usize>,
    /// Risk-free rate in percent points per period.
    pub risk_free: f64,
}

/// Per-series OLS of `R_i − R_F` on `R_M − R_F` with an intercept. Stock
/// returns are taken on their original (uncentered) scale.
pub fn capm_betas(stocks: &ReturnsPanel, market: &MarketSeries, risk_free: f64) -> Result<CapmResult> {
    if !risk_free.is_finite() {
        return Err(Error::InvalidArgument("risk-free rate must be finite".into()));
    }
    let m = market.aligned_to(stocks.dates());
    let raw = stocks.decentered();
    let s = stocks.n_series();
    let mut out = CapmResult {
        tickers: stocks.tickers().to_vec(),
        betas: Vec::with_capacity(s),
        intercepts: Vec::with_capacity(s),
        r_squared: Vec::with_capacity(s),
        n_obs: Vec::with_capacity(s),
        risk_free,
    };
    for j in 0..s {
        let (x, y): (Vec<f64>, Vec<f64>) = (0..raw.nrows())
            .filter(|&t| !m[t].is_nan() && !raw[(t, j)].is_nan())
            .map(|t| (m[t] - risk_free, raw[(t, j)] - risk_free))
            .unzip();
        if x.len() < 3 {
            return Err(Error::Data(format!(
                "series {} has {} observations aligned with the market",
                stocks.tickers()[j],
                x.len()
            )));
        }
        let (alpha, beta, r2) = simple_ols(&x, &y).ok_or_else(|| {
            Error::Degenerate(format!("market excess return is constant over series {}", stocks.tickers()[j]))
        })?;
        out.intercepts.push(alpha);
        out.betas.push(beta);
        out.r_squared.push(r2);
        out.n_obs.push(x.len());
    }
    Ok(out)
}

/// Closed-form single-regressor OLS from centered moments, so that `y = x`
/// gives a slope of exactly one. `None` when `x` is constant.
fn simple_ols(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return None;
    }
    let beta = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy / sxx) * (sxy / syy) };
    Some((my - beta * mx, beta, r2.clamp(0.0, 1.0)))
}

/// Pearson correlation over pairs where neither entry is `NaN`.
pub fn correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("series lengths {} and {} differ", a.len(), b.len())));
    }
    let pairs: Vec<(f64, f64)> = a.iter().zip(b).filter(|(x, y)| !x.is_nan() && !y.is_nan()).map(|(x, y)| (*x, *y)).collect();
    if pairs.len() < 2 {
        return Err(Error::Data("correlation needs at least 2 aligned pairs".into()));
    }
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        let (u, v) = (x - ma, y - mb);
        sab += u * v;
        saa += u * u;
        sbb += v * v;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("correlation of a constant series".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    /// Intercept first, then one slope per regressor.
    pub coefficients: DVector<f64>,
    pub r_squared: f64,
    pub residuals: DVector<f64>,
}

/// OLS of `y` on an intercept and the given regressors. Rows with a `NaN`
/// anywhere are dropped.
pub fn regress(y: &[f64], xs: &[&[f64]]) -> Result<OlsFit> {
    if let Some(x) = xs.iter().find(|x| x.len() != y.len()) {
        return Err(Error::Dimension(format!("regressor has {} rows, response has {}", x.len(), y.len())));
    }
    let rows: Vec<usize> = (0..y.len()).filter(|&t| !y[t].is_nan() && xs.iter().all(|x| !x[t].is_nan())).collect();
    let k = xs.len() + 1;
    let design = DMatrix::from_fn(rows.len(), k, |i, j| if j == 0 { 1.0 } else { xs[j - 1][rows[i]] });
    let resp = DVector::from_iterator(rows.len(), rows.iter().map(|&t| y[t]));
    let coefficients = least_squares(&design, &resp)?;
    let residuals = &resp - &design * &coefficients;
    let mean = resp.mean();
    let tss: f64 = resp.iter().map(|v| (v - mean).powi(2)).sum();
    let rss = residuals.norm_squared();
    let r_squared = if tss == 0.0 { 1.0 } else { (1.0 - rss / tss).clamp(0.0, 1.0) };
    Ok(OlsFit { coefficients, r_squared, residuals })
}
