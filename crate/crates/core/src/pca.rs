//! Principal components of a return panel.
//!
//! Missing entries are imputed with zero (the centered mean) before any
//! computation here. Covariances use the `T − 1` denominator. Each loadvector
//! is signed so that its largest-magnitude entry is positive.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::ingest::ReturnsPanel;

#[derive(Debug, Clone, Copy, Default)]
pub struct PcaOptions {
    /// Work on the correlation matrix (standardised columns) instead of the
    /// covariance matrix.
    pub correlation: bool,
}

#[derive(Debug, Clone)]
pub struct PcaResult {
    /// All eigenvalues of the covariance matrix, descending.
    pub eigenvalues: DVector<f64>,
    /// `S × k` unit eigenvectors for the leading `k` eigenvalues.
    pub loadvectors: DMatrix<f64>,
    /// `T × k` component scores `X a_(j)`.
    pub components: DMatrix<f64>,
}

impl PcaResult {
    /// Share of total variance carried by each eigenvalue.
    pub fn explained_ratio(&self) -> DVector<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        self.eigenvalues.map(|v| v / total)
    }
}

/// Column-centered, zero-imputed data matrix; optionally standardised.
pub(crate) fn design(returns: &ReturnsPanel, standardize: bool) -> Result<DMatrix<f64>> {
    let (t, _) = returns.returns().shape();
    if t < 2 {
        return Err(Error::Data("covariance needs at least 2 rows".into()));
    }
    for (j, col) in returns.returns().column_iter().enumerate() {
        if col.iter().all(|v| v.is_nan()) {
            return Err(Error::Data(format!("series {} is entirely missing", returns.tickers()[j])));
        }
    }
    let mut x = returns.imputed();
    for mut col in x.column_iter_mut() {
        let m = col.mean();
        col.apply(|v| *v -= m);
        if standardize {
            let sd = (col.norm_squared() / (t as f64 - 1.0)).sqrt();
            if sd == 0.0 {
                return Err(Error::Degenerate("zero-variance series cannot be standardised".into()));
            }
            col.apply(|v| *v /= sd);
        }
    }
    Ok(x)
}

/// Sample covariance (denominator `T − 1`) of the zero-imputed panel.
pub fn sample_covariance(returns: &ReturnsPanel) -> Result<DMatrix<f64>> {
    let x = design(returns, false)?;
    Ok(covariance_of(&x))
}

fn covariance_of(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = x.tr_mul(x) / (x.nrows() as f64 - 1.0);
    crate::linalg::symmetrize(&mut c);
    c
}

/// Eigenpairs sorted by descending eigenvalue with the sign convention applied.
pub(crate) fn sorted_eigen(cov: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let eig = SymmetricEigen::try_new(cov.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("covariance eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..cov.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = eig.eigenvectors.select_columns(&order);
    for mut col in vectors.column_iter_mut() {
        let pivot = col.iter().copied().fold(0.0_f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    Ok((values, vectors))
}

pub fn principal_components(returns: &ReturnsPanel, k: usize) -> Result<PcaResult> {
    principal_components_with(returns, k, PcaOptions::default())
}

pub fn principal_components_with(returns: &ReturnsPanel, k: usize, opts: PcaOptions) -> Result<PcaResult> {
    let (t, s) = returns.returns().shape();
    if k == 0 || k > s.min(t) {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={}", s.min(t))));
    }
    let x = design(returns, opts.correlation)?;
    let (eigenvalues, vectors) = sorted_eigen(&covariance_of(&x))?;
    let loadvectors = vectors.columns(0, k).into_owned();
    let components = &x * &loadvectors;
    Ok(PcaResult { eigenvalues, loadvectors, components })
}

/// Mean squared residual over all `T·S` entries after projecting the
/// centered panel onto its top `n` principal directions.
pub fn pca_residual_mse(returns: &ReturnsPanel, n: usize) -> Result<f64> {
    let curve = residual_mse_curve(returns, n)?;
    Ok(curve[n])
}

/// `V(0), …, V(n_max)` from a single eigendecomposition.
pub fn residual_mse_curve(returns: &ReturnsPanel, n_max: usize) -> Result<Vec<f64>> {
    let (t, s) = returns.returns().shape();
    if n_max > s.min(t) {
        return Err(Error::InvalidArgument(format!("n = {n_max} outside 0..={}", s.min(t))));
    }
    let x = design(returns, false)?;
    let (_, vectors) = sorted_eigen(&covariance_of(&x))?;
    let total = (t * s) as f64;
    let mut out = Vec::with_capacity(n_max + 1);
    let mut resid = x.clone();
    out.push(resid.norm_squared() / total);
    for j in 0..n_max {
        let a = vectors.column(j);
        let score = &x * a;
        resid.ger(-1.0, &score, &a, 1.0);
        out.push(resid.norm_squared() / total);
    }
    Ok(out)
}
