//! Bijection between [`DfmParams`] and an unconstrained real vector.
//!
//! Layout of the packed vector:
//!
//! 1. `beta` row by row, skipping the zero upper triangle of the top block;
//!    diagonal entries of that block pass through an inverse softplus.
//! 2. `ln σ_i` for each series.
//! 3. The factor VAR, `n²·p` entries, through [`unconstrain_var`].
//! 4. For each series, its `q` AR coefficients through the same map with `n = 1`.
//!
//! The VAR map sends each free `n × n` block `A_s` to a partial
//! autocorrelation `P_s = L⁻¹A_s` with `LLᵀ = I + A_sAₛᵀ`, so every `P_s` has
//! singular values below one, and rebuilds the coefficients with the
//! multivariate Levinson–Whittle recursion. Any real input yields a stable
//! VAR with unit innovation covariance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, reverse_cholesky};
use crate::statespace::{var_companion, DfmParams, DfmSpec};

/// Diagonal loadings below this are lifted before the inverse softplus.
pub const MIN_DIAGONAL_LOADING: f64 = 1e-10;

fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

fn softplus_inv(b: f64) -> f64 {
    b + (-(-b).exp_m1()).ln()
}

/// Length of the packed vector for `spec`.
pub fn packed_len(spec: &DfmSpec) -> usize {
    let DfmSpec { n, p, q, s } = *spec;
    s * n - n * (n - 1) / 2 + s + n * n * p + s * q
}

fn is_free_loading(i: usize, j: usize) -> bool {
    i >= j
}

pub fn pack(params: &DfmParams) -> Result<DVector<f64>> {
    let spec = params.spec();
    params.check_shape(&spec)?;
    if !params.is_identified() {
        return Err(Error::InvalidArgument(
            "beta top block must be lower triangular with a nonnegative diagonal".into(),
        ));
    }
    let mut out = Vec::with_capacity(packed_len(&spec));
    for i in 0..spec.s {
        for j in 0..spec.n {
            if !is_free_loading(i, j) {
                continue;
            }
            let b = params.beta[(i, j)];
            out.push(if i == j { softplus_inv(b.max(MIN_DIAGONAL_LOADING)) } else { b });
        }
    }
    for &sg in params.sigma.iter() {
        if sg.is_nan() || sg <= 0.0 {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sg}")));
        }
        out.push(sg.ln());
    }
    for a in unconstrain_var(&params.lambda)? {
        out.extend(a.iter());
    }
    for i in 0..spec.s {
        let lags: Vec<DMatrix<f64>> = params.psi_of(i).into_iter().map(|c| DMatrix::from_element(1, 1, c)).collect();
        for a in unconstrain_var(&lags)? {
            out.push(a[(0, 0)]);
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("packed parameters are not finite".into()));
    }
    Ok(DVector::from_vec(out))
}

pub fn unpack(x: &DVector<f64>, spec: &DfmSpec) -> Result<DfmParams> {
    spec.validate()?;
    if spec.s < spec.n {
        return Err(Error::InvalidArgument(format!("S = {} is below n = {}", spec.s, spec.n)));
    }
    if x.len() != packed_len(spec) {
        return Err(Error::Dimension(format!("packed vector has {} entries, expected {}", x.len(), packed_len(spec))));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("packed vector has non-finite entries".into()));
    }
    let DfmSpec { n, p, q, s } = *spec;
    let mut it = x.iter().copied();
    let mut next = || it.next().expect("length checked above");

    let mut beta = DMatrix::zeros(s, n);
    for i in 0..s {
        for j in 0..n {
            if is_free_loading(i, j) {
                let u = next();
                beta[(i, j)] = if i == j { softplus(u) } else { u };
            }
        }
    }
    let sigma = DVector::from_fn(s, |_, _| next().exp());
    let blocks: Vec<DMatrix<f64>> = (0..p).map(|_| DMatrix::from_fn(n, n, |_, _| next())).collect();
    let lambda = constrain_var(&blocks)?;
    let mut psi = vec![DVector::zeros(s); q];
    for i in 0..s {
        let blocks: Vec<DMatrix<f64>> = (0..q).map(|_| DMatrix::from_element(1, 1, next())).collect();
        for (j, c) in constrain_var(&blocks)?.into_iter().enumerate() {
            psi[j][i] = c[(0, 0)];
        }
    }
    if sigma.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Numerical("sigma under- or overflowed".into()));
    }
    Ok(DfmParams { beta, sigma, lambda, psi })
}

fn chol_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut sym = m.clone();
    linalg::symmetrize(&mut sym);
    nalgebra::Cholesky::new(sym)
        .map(|c| c.l())
        .ok_or_else(|| Error::Numerical("stationarity transform lost positive definiteness".into()))
}

fn inv_lower(l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    l.solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Numerical("singular triangular factor".into()))
}

/// Maps free `n × n` blocks to stationary VAR coefficients with identity
/// innovation covariance.
pub fn constrain_var(blocks: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    let p = blocks.len();
    if p == 0 {
        return Ok(Vec::new());
    }
    let n = blocks[0].nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let partials = blocks
        .iter()
        .map(|a| Ok(inv_lower(&chol_lower(&(&eye + a * a.transpose()))?)? * a))
        .collect::<Result<Vec<_>>>()?;

    let (mut v_fwd, mut v_bwd) = (eye.clone(), eye.clone());
    let (mut fwd, mut bwd): (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) = (Vec::new(), Vec::new());
    for part in &partials {
        let lf = chol_lower(&v_fwd)?;
        let lb = chol_lower(&v_bwd)?;
        let phi = &lf * part * inv_lower(&lb)?;
        let phi_b = &lb * part.transpose() * inv_lower(&lf)?;
        whittle_step(&mut fwd, &mut bwd, phi, phi_b, &mut v_fwd, &mut v_bwd);
    }
    // Similarity transform to unit innovation covariance.
    let lv = chol_lower(&v_fwd)?;
    let lv_inv = inv_lower(&lv)?;
    Ok(fwd.iter().map(|f| &lv_inv * f * &lv).collect())
}

/// One order increase of the Levinson–Whittle recursion given the new
/// forward and backward last-lag coefficients.
fn whittle_step(
    fwd: &mut Vec<DMatrix<f64>>,
    bwd: &mut Vec<DMatrix<f64>>,
    phi: DMatrix<f64>,
    phi_b: DMatrix<f64>,
    v_fwd: &mut DMatrix<f64>,
    v_bwd: &mut DMatrix<f64>,
) {
    let s = fwd.len();
    let new_fwd: Vec<DMatrix<f64>> = (0..s).map(|k| &fwd[k] - &phi * &bwd[s - 1 - k]).collect();
    let new_bwd: Vec<DMatrix<f64>> = (0..s).map(|k| &bwd[k] - &phi_b * &fwd[s - 1 - k]).collect();
    let next_fwd_var = &*v_fwd - &phi * &*v_bwd * phi.transpose();
    let next_bwd_var = &*v_bwd - &phi_b * &*v_fwd * phi_b.transpose();
    *fwd = new_fwd;
    *bwd = new_bwd;
    fwd.push(phi);
    bwd.push(phi_b);
    *v_fwd = next_fwd_var;
    *v_bwd = next_bwd_var;
}

/// Autocovariances `Γ(0), …, Γ(p)` with `Γ(h) = E[x_t x_{t−h}ᵀ]` of a VAR with
/// unit innovation covariance.
fn var_autocovariances(lags: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    let p = lags.len();
    let n = lags[0].nrows();
    let c = var_companion(lags);
    let mut q = DMatrix::zeros(n * p, n * p);
    q.view_mut((0, 0), (n, n)).fill_with_identity();
    let big = linalg::discrete_lyapunov(&c, &q)?;
    let mut gamma: Vec<DMatrix<f64>> = (0..p).map(|h| big.view((0, h * n), (n, n)).into_owned()).collect();
    let last = (0..p).fold(DMatrix::zeros(n, n), |acc, k| acc + &lags[k] * &gamma[p - 1 - k]);
    gamma.push(last);
    Ok(gamma)
}

/// Inverse of [`constrain_var`]. Fails for a non-stationary VAR.
pub fn unconstrain_var(lags: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    let p = lags.len();
    if p == 0 {
        return Ok(Vec::new());
    }
    let n = lags[0].nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let gamma = var_autocovariances(lags)?;
    let c_inv = inv_lower(&chol_lower(&gamma[0])?)?;
    let gamma: Vec<DMatrix<f64>> = gamma.iter().map(|g| &c_inv * g * c_inv.transpose()).collect();

    let (mut v_fwd, mut v_bwd) = (eye.clone(), eye.clone());
    let (mut fwd, mut bwd): (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) = (Vec::new(), Vec::new());
    let mut out = Vec::with_capacity(p);
    for s in 0..p {
        let mut delta = gamma[s + 1].clone();
        for (k, f) in fwd.iter().enumerate() {
            delta -= f * &gamma[s - k];
        }
        let lf = chol_lower(&v_fwd)?;
        let lb = chol_lower(&v_bwd)?;
        let part = inv_lower(&lf)? * &delta * inv_lower(&lb)?.transpose();
        let resid = &eye - &part * part.transpose();
        let resid_inv = resid
            .try_inverse()
            .ok_or_else(|| Error::NonStationary("partial autocorrelation on the unit circle".into()))?;
        let l = reverse_cholesky(&resid_inv)
            .ok_or_else(|| Error::NonStationary("partial autocorrelation outside the unit ball".into()))?;
        out.push(l * &part);

        let phi = &delta * chol_inverse(&v_bwd)?;
        let phi_b = delta.transpose() * chol_inverse(&v_fwd)?;
        whittle_step(&mut fwd, &mut bwd, phi, phi_b, &mut v_fwd, &mut v_bwd);
    }
    Ok(out)
}

fn chol_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut sym = m.clone();
    linalg::symmetrize(&mut sym);
    nalgebra::Cholesky::new(sym)
        .map(|c| c.inverse())
        .ok_or_else(|| Error::NonStationary("prediction error variance is not positive definite".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statespace::check_stationarity;

    #[test]
    fn softplus_round_trip() {
        for b in [1e-8, 0.01, 0.7, 3.0, 40.0] {
            assert!((softplus(softplus_inv(b)) - b).abs() <= 1e-12 * b.max(1.0));
        }
    }

    #[test]
    fn scalar_ar1_matches_closed_form() {
        // One lag with n = 1 reduces to φ = a/√(1+a²).
        let a = 1.3;
        let phi = constrain_var(&[DMatrix::from_element(1, 1, a)]).unwrap();
        assert!((phi[0][(0, 0)] - a / (1.0 + a * a).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn zero_vector_unpacks_to_stationary_params() {
        let spec = DfmSpec::new(2, 2, 1, 4).unwrap();
        let params = unpack(&DVector::zeros(packed_len(&spec)), &spec).unwrap();
        assert!(check_stationarity(&params).unwrap().stationary);
        assert!(params.is_identified());
    }

    #[test]
    fn var_round_trip() {
        let blocks = vec![
            DMatrix::from_row_slice(2, 2, &[0.4, -1.2, 0.3, 2.0]),
            DMatrix::from_row_slice(2, 2, &[-0.5, 0.1, 0.9, 0.2]),
        ];
        let lags = constrain_var(&blocks).unwrap();
        let back = unconstrain_var(&lags).unwrap();
        for (a, b) in blocks.iter().zip(&back) {
            assert!((a - b).abs().max() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn pack_rejects_zero_sigma() {
        let spec = DfmSpec::new(1, 1, 0, 2).unwrap();
        let mut params = unpack(&DVector::zeros(packed_len(&spec)), &spec).unwrap();
        params.sigma[1] = 0.0;
        assert!(pack(&params).is_err());
    }

    #[test]
    fn non_stationary_var_is_rejected() {
        assert!(unconstrain_var(&[DMatrix::from_element(1, 1, 1.05)]).is_err());
    }
}
