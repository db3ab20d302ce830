//! Quasi-Newton minimisation with finite-difference derivatives.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::par::{map_indexed, Parallelism};

/// A scalar function to minimise. Evaluations that fail should return a
/// non-finite value; the line search treats them as rejected steps.
pub trait Objective: Sync {
    type Workspace: Send;

    fn workspace(&self) -> Self::Workspace;

    fn eval(&self, ws: &mut Self::Workspace, x: &DVector<f64>) -> f64;
}

/// Adapter for plain closures.
pub struct FnObjective<F>(pub F);

impl<F> Objective for FnObjective<F>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    type Workspace = ();

    fn workspace(&self) {}

    fn eval(&self, _: &mut (), x: &DVector<f64>) -> f64 {
        (self.0)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the gradient max-norm falls below this.
    pub grad_tol: f64,
    /// Stop when an accepted step changes the objective by less than this,
    /// relative to `max(|f|, 1)`.
    pub rel_tol: f64,
    /// The `rel_tol` stop only applies once the gradient max-norm is below
    /// this; on sharply curved objectives a tiny step can precede a large
    /// remaining gradient.
    pub rel_tol_grad_cap: f64,
    /// Finite-difference step relative to `max(|x_i|, 1)`.
    pub fd_step: f64,
    /// Cap on the max-norm of any trial step.
    pub max_step: f64,
    pub parallelism: Parallelism,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-4,
            rel_tol: 1e-9,
            rel_tol_grad_cap: 1e-3,
            fd_step: 1e-5,
            max_step: 5.0,
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Gradient,
    RelativeChange,
    LineSearch,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub reason: StopReason,
}

impl OptimResult {
    pub fn converged(&self) -> bool {
        matches!(self.reason, StopReason::Gradient | StopReason::RelativeChange)
    }
}

fn step_size(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

/// Central-difference gradient; coordinates are evaluated as one batch.
/// Falls back to a one-sided difference when one neighbour is not finite.
pub fn numerical_gradient<O: Objective>(
    obj: &O,
    x: &DVector<f64>,
    fx: f64,
    rel_step: f64,
    mode: Parallelism,
) -> Result<DVector<f64>> {
    let k = x.len();
    let vals = map_indexed(
        2 * k,
        mode,
        || (obj.workspace(), x.clone()),
        |(ws, xp), j| {
            let i = j / 2;
            let h = step_size(x[i], rel_step);
            xp[i] = if j % 2 == 0 { x[i] + h } else { x[i] - h };
            let v = obj.eval(ws, xp);
            xp[i] = x[i];
            v
        },
    );
    let mut g = DVector::zeros(k);
    for i in 0..k {
        let h = step_size(x[i], rel_step);
        let (fp, fm) = (vals[2 * i], vals[2 * i + 1]);
        g[i] = match (fp.is_finite(), fm.is_finite()) {
            (true, true) => (fp - fm) / (2.0 * h),
            (true, false) => (fp - fx) / h,
            (false, true) => (fx - fm) / h,
            (false, false) => {
                return Err(Error::Numerical(format!("objective not finite around coordinate {i}")));
            }
        };
    }
    Ok(g)
}

/// Central second differences over all coordinate pairs.
pub fn numerical_hessian<O: Objective>(
    obj: &O,
    x: &DVector<f64>,
    rel_step: f64,
    mode: Parallelism,
) -> Result<DMatrix<f64>> {
    let k = x.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i..k).map(move |j| (i, j))).collect();
    let fx = obj.eval(&mut obj.workspace(), x);
    if !fx.is_finite() {
        return Err(Error::Numerical("objective not finite at the Hessian point".into()));
    }
    let h: Vec<f64> = x.iter().map(|&v| step_size(v, rel_step)).collect();
    let entries = map_indexed(
        pairs.len(),
        mode,
        || (obj.workspace(), x.clone()),
        |(ws, xp), idx| {
            let (i, j) = pairs[idx];
            let mut at = |di: f64, dj: f64| {
                xp[i] += di;
                xp[j] += dj;
                let v = obj.eval(ws, xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            if i == j {
                (at(h[i], 0.0) - 2.0 * fx + at(-h[i], 0.0)) / (h[i] * h[i])
            } else {
                (at(h[i], h[j]) - at(h[i], -h[j]) - at(-h[i], h[j]) + at(-h[i], -h[j])) / (4.0 * h[i] * h[j])
            }
        },
    );
    let mut out = DMatrix::zeros(k, k);
    for (&(i, j), &v) in pairs.iter().zip(&entries) {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("Hessian entry ({i}, {j}) is not finite")));
        }
        out[(i, j)] = v;
        out[(j, i)] = v;
    }
    Ok(out)
}

/// BFGS on the inverse Hessian with Armijo backtracking.
pub fn minimize_bfgs<O: Objective>(obj: &O, x0: &DVector<f64>, opts: &BfgsOptions) -> Result<OptimResult> {
    let k = x0.len();
    let mut ws = obj.workspace();
    let mut evals = 1usize;
    let mut x = x0.clone();
    let mut fx = obj.eval(&mut ws, &x);
    if !fx.is_finite() {
        return Err(Error::Numerical("objective is not finite at the starting point".into()));
    }
    let mut g = numerical_gradient(obj, &x, fx, opts.fd_step, opts.parallelism)?;
    evals += 2 * k;
    let eye = DMatrix::<f64>::identity(k, k);
    let mut hinv = eye.clone();
    let mut fresh = true;
    let mut iterations = 0;

    let reason = loop {
        if g.amax() < opts.grad_tol {
            break StopReason::Gradient;
        }
        if iterations >= opts.max_iter {
            break StopReason::MaxIterations;
        }
        iterations += 1;

        let mut dir = -(&hinv * &g);
        let mut slope = dir.dot(&g);
        if !(slope < 0.0) {
            hinv.copy_from(&eye);
            fresh = true;
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        let scale = (opts.max_step / dir.amax()).min(1.0);
        let mut alpha = scale;
        let mut accepted = None;
        for _ in 0..50 {
            let trial = &x + alpha * &dir;
            let ft = obj.eval(&mut ws, &trial);
            evals += 1;
            if ft.is_finite() && ft <= fx + 1e-4 * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            if fresh {
                break StopReason::LineSearch;
            }
            hinv.copy_from(&eye);
            fresh = true;
            continue;
        };

        let g_new = numerical_gradient(obj, &x_new, f_new, opts.fd_step, opts.parallelism)?;
        evals += 2 * k;
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        let small_change = (fx - f_new).abs() <= opts.rel_tol * fx.abs().max(1.0);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                hinv *= sy / y.norm_squared();
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H ← H − ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            hinv.ger(-rho, &hy, &s, 1.0);
            hinv.ger(-rho, &s, &hy, 1.0);
            hinv.ger(rho * rho * yhy + rho, &s, &s, 1.0);
            fresh = false;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        if small_change && g.amax() < opts.rel_tol_grad_cap {
            break StopReason::RelativeChange;
        }
    };
    log::debug!("bfgs stopped after {iterations} iterations ({reason:?}), f = {fx}");
    Ok(OptimResult { x, value: fx, gradient: g, iterations, evaluations: evals, reason })
}
