//! Regularize singular marginals by ε on their null space and watch the
//! full-rank boundary values approach the closed-form limits.

use covbridge::verify::epsilon_errors;
use covbridge::{sweep_epsilon, GaussianMarginal, LinearSystem, MatrixFunction};
use nalgebra::{DMatrix, DVector};

fn main() -> Result<(), covbridge::BridgeError> {
    let sys = LinearSystem::new(
        MatrixFunction::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])),
        MatrixFunction::constant(DMatrix::from_row_slice(2, 1, &[0.0, 1.0])),
        1.0,
    )?;
    let m0 = GaussianMarginal::new(&DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 0.0])))?;
    let mt = GaussianMarginal::new(&DMatrix::from_diagonal(&DVector::from_row_slice(&[0.2, 0.0])))?;
    let eps: Vec<f64> = (2..=8).map(|k| 10f64.powi(-k)).collect();

    println!("{:>8} {:>12} {:>12}", "eps", "Q(0)^-1 err", "P(T)^-1 err");
    for e in epsilon_errors(&sys, &m0, &mt, &eps)? {
        let show = |r: &Result<f64, covbridge::BridgeError>| r.as_ref().map_or("failed".into(), |v| format!("{v:.3e}"));
        println!("{:>8.0e} {:>12} {:>12}", e.eps, show(&e.q0_error), show(&e.pt_error));
    }
    let report = sweep_epsilon(&sys, &m0, &mt, &eps);
    for c in &report.checks {
        println!("{:<28} {:?}", c.name, c.status);
    }
    Ok(())
}
