//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Schur, SymmetricEigen};

use crate::error::{Error, Result};

/// Replaces `m` with `(m + mᵀ)/2`. The result is exactly symmetric.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension("spectral radius needs a square matrix".into()));
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite matrix entry".into()));
    }
    if m.nrows() == 1 {
        return Ok(m[(0, 0)].abs());
    }
    match Schur::try_new(m.clone(), f64::EPSILON, 10_000) {
        Some(schur) => Ok(schur.complex_eigenvalues().iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))),
        None => Ok(gelfand_radius(m)),
    }
}

/// `lim ‖Aᵐ‖^{1/m}` by repeated squaring; used when QR iteration stalls,
/// typically on (near-)nilpotent companion matrices.
fn gelfand_radius(m: &DMatrix<f64>) -> f64 {
    let norm = m.norm();
    if norm == 0.0 {
        return 0.0;
    }
    let mut c = m / norm;
    let mut log_norm = norm.ln();
    let mut power = 1.0_f64;
    for _ in 0..40 {
        let sq = &c * &c;
        let nsq = sq.norm();
        if nsq == 0.0 {
            return 0.0;
        }
        log_norm = 2.0 * log_norm + nsq.ln();
        power *= 2.0;
        c = sq / nsq;
    }
    (log_norm / power).exp()
}

/// Moore-Penrose inverse of a symmetric matrix; eigenvalues with magnitude
/// at most `rel_tol · max|λ|` are treated as zero.
pub fn pinv_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("symmetric eigendecomposition did not converge".into()))?;
    let top = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let mut out = DMatrix::zeros(n, n);
    if top == 0.0 {
        return Ok(out);
    }
    let cut = rel_tol * top;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam.abs() <= cut {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        out.ger(1.0 / lam, &v, &v, 1.0);
    }
    symmetrize(&mut out);
    Ok(out)
}

/// Cholesky factorisation that retries with `ε·I` added, where
/// `ε = 1e-10·trace/k` escalates by ×10 up to `1e-6·trace/k`.
/// Returns the factor and the jitter actually applied.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Ok((ch, 0.0));
    }
    let k = m.nrows().max(1) as f64;
    let scale = (m.trace() / k).abs().max(f64::MIN_POSITIVE);
    let mut rel = 1e-10;
    while rel <= 1e-6 * (1.0 + 1e-9) {
        let eps = rel * scale;
        let mut jittered = m.clone();
        for i in 0..m.nrows() {
            jittered[(i, i)] += eps;
        }
        if let Some(ch) = Cholesky::new(jittered) {
            return Ok((ch, eps));
        }
        rel *= 10.0;
    }
    Err(Error::Numerical("innovation covariance is singular beyond the jitter budget".into()))
}

/// Lower-triangular `L` with `Lᵀ L = m` (reverse Cholesky).
pub fn reverse_cholesky(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let flip = |a: &DMatrix<f64>| DMatrix::from_fn(n, n, |i, j| a[(n - 1 - i, n - 1 - j)]);
    let g = Cholesky::new(flip(m))?.l();
    Some(flip(&g.transpose()))
}

/// Solves the discrete Lyapunov equation `P = A P Aᵀ + Q` for stable `A`.
///
/// The index set is first split into connected components of the sparsity
/// graph of `A` and `Q`; each component is solved independently with the
/// doubling iteration, which keeps block-structured state spaces cheap.
pub fn discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    if a.ncols() != d || q.nrows() != d || q.ncols() != d {
        return Err(Error::Dimension("Lyapunov operands must be square and equal-sized".into()));
    }
    let mut out = DMatrix::zeros(d, d);
    for comp in components(a, q) {
        let k = comp.len();
        let sub_a = DMatrix::from_fn(k, k, |i, j| a[(comp[i], comp[j])]);
        let sub_q = DMatrix::from_fn(k, k, |i, j| q[(comp[i], comp[j])]);
        let radius = spectral_radius(&sub_a)?;
        if radius >= 1.0 - STATIONARITY_MARGIN {
            return Err(Error::NonStationary(format!("transition spectral radius {radius:.12}")));
        }
        let p = lyapunov_doubling(sub_a, sub_q)?;
        for (i, &gi) in comp.iter().enumerate() {
            for (j, &gj) in comp.iter().enumerate() {
                out[(gi, gj)] = p[(i, j)];
            }
        }
    }
    symmetrize(&mut out);
    Ok(out)
}

/// Spectral radii within this distance of one are treated as unit roots.
pub const STATIONARITY_MARGIN: f64 = 1e-10;

fn lyapunov_doubling(mut a: DMatrix<f64>, mut p: DMatrix<f64>) -> Result<DMatrix<f64>> {
    for _ in 0..200 {
        let term = &a * &p * a.transpose();
        let scale = max_abs(&p).max(f64::MIN_POSITIVE);
        p += &term;
        if max_abs(&term) <= 1e-17 * scale {
            return Ok(p);
        }
        a = &a * &a;
        if max_abs(&a) == 0.0 {
            return Ok(p);
        }
    }
    Err(Error::Numerical("Lyapunov doubling did not converge".into()))
}

fn components(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let d = a.nrows();
    let mut parent: Vec<usize> = (0..d).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..d {
        for j in 0..d {
            if i != j && (a[(i, j)] != 0.0 || q[(i, j)] != 0.0) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; d];
    for i in 0..d {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}

/// Ordinary least squares `y ≈ X b` through a column-pivot-free QR. Fails when
/// the design is numerically rank deficient.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(Error::Dimension(format!("design has {n} rows, response has {}", y.len())));
    }
    if n < k {
        return Err(Error::Degenerate(format!("{n} observations for {k} coefficients")));
    }
    if k == 0 {
        return Ok(DVector::zeros(0));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..k).map(|j| x.column(j).norm()).fold(0.0_f64, f64::max);
    for j in 0..k {
        if r[(j, j)].abs() <= 1e-10 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Degenerate(format!("design matrix is rank deficient at column {j}")));
        }
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))
}

/// Minimum-norm least squares through the SVD; singular values at most
/// `1e-12` times the largest are discarded.
pub fn least_squares_min_norm(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if y.len() != x.nrows() {
        return Err(Error::Dimension(format!("design has {} rows, response has {}", x.nrows(), y.len())));
    }
    if x.ncols() == 0 || x.nrows() == 0 {
        return Ok(DVector::zeros(x.ncols()));
    }
    let svd = x.clone().svd(true, true);
    let cut = 1e-12 * svd.singular_values.max();
    svd.solve(y, cut).map_err(|e| Error::Numerical(format!("SVD solve failed: {e}")))
}
