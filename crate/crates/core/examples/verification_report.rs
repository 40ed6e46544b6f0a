//! Every cross-check on one problem, serialized as the JSON report the CLI writes.

use covbridge::{
    run_full_verification, simulate_controlled, simulate_uncontrolled, solve_singular, Ensembles, GaussianMarginal,
    LinearSystem, MatrixFunction, SimulationConfig, VerificationConfig,
};
use nalgebra::{DMatrix, DVector};

fn main() -> Result<(), covbridge::BridgeError> {
    let sys = LinearSystem::new(
        MatrixFunction::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])),
        MatrixFunction::constant(DMatrix::from_row_slice(2, 1, &[0.0, 1.0])),
        1.0,
    )?;
    let m0 = GaussianMarginal::new(&DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 0.0])))?;
    let mt = GaussianMarginal::new(&DMatrix::from_diagonal(&DVector::from_row_slice(&[0.2, 0.0])))?;
    let sol = solve_singular(&sys, &m0, &mt, 2000, 1e-3)?;

    let cfg = SimulationConfig { paths: 5000, horizon_clip: 0.05, seed: 7, ..Default::default() };
    let controlled = simulate_controlled(&sys, &sol, &cfg)?;
    let uncontrolled = simulate_uncontrolled(&sys, &m0, &SimulationConfig { horizon_clip: 0.0, ..cfg })?;
    let ens = Ensembles { controlled: Some(&controlled), uncontrolled: Some(&uncontrolled), reverse: None };

    let report = run_full_verification(&sys, &m0, &mt, &sol, &ens, &VerificationConfig::default());
    println!("{}", report.to_json());
    match report.first_failure() {
        Some(c) => eprintln!("first failure: {}", c.name),
        None => eprintln!("all {} checks passed", report.checks.len()),
    }
    Ok(())
}
