//! Full-rank bridge: closed-form boundary values, then the Lyapunov pair
//! integrated forward from t = 0 and backward from t = T.

use covbridge::bridge_core::integrate_lyapunov_pair_backward;
use covbridge::{boundary_nonsingular, integrate_lyapunov_pair, GaussianMarginal, LinearSystem, MatrixFunction};
use nalgebra::DMatrix;

fn main() -> Result<(), covbridge::BridgeError> {
    let sys = LinearSystem::new(
        MatrixFunction::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.5])),
        MatrixFunction::constant(DMatrix::from_row_slice(2, 1, &[0.0, 1.0])),
        1.0,
    )?;
    let m0 = GaussianMarginal::new(&DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]))?;
    let mt = GaussianMarginal::new(&DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.4]))?;

    let bp = boundary_nonsingular(&sys, &m0, &mt)?;
    let (r0, rt) = bp.residuals(&m0, &mt, 1e-14)?;
    println!("boundary residuals: {r0:.2e} at 0, {rt:.2e} at T");

    let fwd = integrate_lyapunov_pair(&sys, &bp, 1000)?;
    let back = integrate_lyapunov_pair_backward(&sys, &bp, 1000)?;
    let inv = |m: &Option<DMatrix<f64>>| m.as_ref().and_then(|x| x.clone().try_inverse()).unwrap();
    let q_t = inv(fwd.q_inv().last().unwrap());
    let p_0 = inv(&back.p_inv()[0]);
    println!("forward  Q(T) mismatch: {:.2e}", (q_t - &bp.qt).norm() / bp.qt.norm());
    println!("backward P(0) mismatch: {:.2e}", (p_0 - &bp.p0).norm() / bp.p0.norm());
    println!("Sigma(0.5) =\n{}", fwd.sigma_at(0.5)?);
    Ok(())
}
