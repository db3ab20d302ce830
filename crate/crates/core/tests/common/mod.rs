//! Shared test helpers: random models and a brute-force joint-Gaussian oracle.
#![allow(dead_code)]

use dynfactor::statespace::{DfmParams, DfmSpec, StateSpaceModel};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().fold(0.0_f64, |a, z| a.max(z.norm()))
}

/// Generic stable model with a full-rank state noise and optional
/// measurement noise. Noise is always added when `s > d`, otherwise the
/// observations would have a singular joint covariance.
pub fn random_model(rng: &mut ChaCha8Rng, d: usize, s: usize, with_measure_noise: bool) -> StateSpaceModel {
    let with_measure_noise = with_measure_noise || s > d;
    let mut t = normal_matrix(rng, d, d);
    let target = rng.random_range(0.3..0.9);
    let r = spectral_radius(&t);
    t *= target / r;
    let m = normal_matrix(rng, s, d);
    let b = normal_matrix(rng, d, d);
    let q = &b * b.transpose() * 0.5 + DMatrix::identity(d, d) * 0.2;
    let rn = if with_measure_noise {
        let c = normal_matrix(rng, s, s);
        &c * c.transpose() * 0.1 + DMatrix::identity(s, s) * 0.05
    } else {
        DMatrix::zeros(s, s)
    };
    StateSpaceModel::new(m, t, rn, q).unwrap()
}

/// Random identified, stationary DFM parameters.
pub fn random_params(rng: &mut ChaCha8Rng, spec: &DfmSpec) -> DfmParams {
    let x = DVector::from_fn(dynfactor::transform::packed_len(spec), |_, _| 0.7 * rng.sample::<f64, _>(StandardNormal));
    dynfactor::transform::unpack(&x, spec).unwrap()
}

/// Draws observations from the model with stationary start.
pub fn sample_obs(rng: &mut ChaCha8Rng, model: &StateSpaceModel, t_obs: usize) -> DMatrix<f64> {
    let s = model.obs_dim();
    let p = dynfactor::statespace::stationary_state_covariance(model).unwrap();
    let draw = |rng: &mut ChaCha8Rng, cov: &DMatrix<f64>| -> DVector<f64> {
        let k = cov.nrows();
        let l = Cholesky::new(cov + DMatrix::identity(k, k) * 1e-14).map(|c| c.l()).unwrap();
        l * DVector::from_fn(k, |_, _| rng.sample(StandardNormal))
    };
    let mut x = draw(rng, &p);
    let mut out = DMatrix::zeros(t_obs, s);
    for t in 0..t_obs {
        let mut y = &model.measure * &x;
        if model.measure_noise.iter().any(|v| *v != 0.0) {
            y += draw(rng, &model.measure_noise);
        }
        out.row_mut(t).copy_from(&y.transpose());
        x = &model.transit * &x + draw(rng, &model.state_noise);
    }
    out
}

/// Exact joint moments of all states and observations under the stationary
/// distribution.
pub struct JointGaussian {
    /// `(t, j)` pairs of observed entries in stacking order.
    pub index: Vec<(usize, usize)>,
    pub y: DVector<f64>,
    /// Covariance of the stacked observed vector.
    pub cov_y: DMatrix<f64>,
    /// `Cov(X_t, Y)` for each t.
    pub cov_xy: Vec<DMatrix<f64>>,
    pub p_inf: DMatrix<f64>,
}

fn mat_pow(t: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::identity(t.nrows(), t.ncols());
    for _ in 0..k {
        out = &out * t;
    }
    out
}

impl JointGaussian {
    pub fn new(model: &StateSpaceModel, obs: &DMatrix<f64>) -> Self {
        let p_inf = dynfactor::statespace::stationary_state_covariance(model).unwrap();
        let (n_t, s) = obs.shape();
        let m = &model.measure;
        // Cov(X_t, X_u) = T^{t-u} P for t >= u.
        let cov_xx = |t: usize, u: usize| -> DMatrix<f64> {
            if t >= u {
                mat_pow(&model.transit, t - u) * &p_inf
            } else {
                &p_inf * mat_pow(&model.transit, u - t).transpose()
            }
        };
        let index: Vec<(usize, usize)> =
            (0..n_t).flat_map(|t| (0..s).map(move |j| (t, j))).filter(|&(t, j)| !obs[(t, j)].is_nan()).collect();
        let k = index.len();
        let y = DVector::from_iterator(k, index.iter().map(|&(t, j)| obs[(t, j)]));
        let mut cov_y = DMatrix::zeros(k, k);
        for (a, &(t, i)) in index.iter().enumerate() {
            for (b, &(u, j)) in index.iter().enumerate() {
                let c = m.row(i) * cov_xx(t, u) * m.row(j).transpose();
                cov_y[(a, b)] = c[(0, 0)] + if t == u { model.measure_noise[(i, j)] } else { 0.0 };
            }
        }
        let d = model.state_dim();
        let cov_xy = (0..n_t)
            .map(|t| {
                let mut c = DMatrix::zeros(d, k);
                for (b, &(u, j)) in index.iter().enumerate() {
                    c.set_column(b, &(cov_xx(t, u) * m.row(j).transpose()));
                }
                c
            })
            .collect();
        Self { index, y, cov_y, cov_xy, p_inf }
    }

    pub fn log_density(&self) -> f64 {
        let k = self.y.len();
        if k == 0 {
            return 0.0;
        }
        let ch = Cholesky::new(self.cov_y.clone()).expect("oracle covariance must be PD");
        let l = ch.l();
        let logdet = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let w = l.solve_lower_triangular(&self.y).unwrap();
        -0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + w.norm_squared())
    }

    /// `E[X_t | Y]` and `Cov(X_t | Y)`.
    pub fn conditional(&self, t: usize) -> (DVector<f64>, DMatrix<f64>) {
        let ch = Cholesky::new(self.cov_y.clone()).expect("oracle covariance must be PD");
        let c = &self.cov_xy[t];
        let mean = c * ch.solve(&self.y);
        let cov = &self.p_inf - c * ch.solve(&c.transpose());
        (mean, cov)
    }
}

pub fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

pub fn panel_from(x: DMatrix<f64>) -> dynfactor::ingest::ReturnsPanel {
    let dates = dynfactor::ingest::weekdays_from(chrono::NaiveDate::from_ymd_opt(2015, 1, 5).unwrap(), x.nrows());
    let tickers = (0..x.ncols()).map(|j| format!("X{:02}", j + 1)).collect();
    dynfactor::ingest::ReturnsPanel::from_grid(dates, tickers, x).unwrap()
}

/// Static one-factor panel: loadings in (0.5, 1.5), factor variance 10,
/// unit idiosyncratic variance.
pub fn strong_one_factor(seed: u64, n_series: usize, t_obs: usize) -> DMatrix<f64> {
    let mut r = rng(seed);
    let beta: Vec<f64> = (0..n_series).map(|_| r.random_range(0.5..1.5)).collect();
    let f = normal_matrix(&mut r, t_obs, 1) * 10f64.sqrt();
    let e = normal_matrix(&mut r, t_obs, n_series);
    DMatrix::from_fn(t_obs, n_series, |t, i| beta[i] * f[(t, 0)] + e[(t, i)])
}
