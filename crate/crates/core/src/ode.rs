//! Fixed-step classical Runge-Kutta integration of matrix-valued ODEs.

use nalgebra::DMatrix;

use crate::error::{BridgeError, Result};

/// One classical RK4 step of `dy/dt = f(t, y)` from `t` with (signed) step `h`.
pub fn rk4_step<F>(f: &F, t: f64, y: &DMatrix<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &(y + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(y + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Integrates from `t0` to `t1` (either direction) with `steps` equal RK4 steps.
pub fn integrate<F>(f: &F, t0: f64, t1: f64, y0: &DMatrix<f64>, steps: usize) -> Result<DMatrix<f64>>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let steps = steps.max(1);
    let h = (t1 - t0) / steps as f64;
    let mut y = y0.clone();
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        y = rk4_step(f, t, &y, h);
        if !all_finite(&y) {
            return Err(BridgeError::IntegrationFailure { t: t + h });
        }
    }
    Ok(y)
}

/// Number of equal sub-steps needed to cover `len` with steps no longer than `max_step`.
pub fn substeps(len: f64, max_step: f64) -> usize {
    if len <= 0.0 {
        return 0;
    }
    ((len / max_step) - 1e-9).ceil().max(1.0) as usize
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}
