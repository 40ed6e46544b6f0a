//! Sample the same bridge forward from Σ₀ and backward from Σ_T, and compare
//! both ensembles with the solver at mid-horizon.

use covbridge::{
    simulate_controlled, simulate_reverse, solve_nonsingular, Direction, GaussianMarginal, LinearSystem, MatrixFunction,
    SimulationConfig,
};
use nalgebra::DMatrix;

fn main() -> Result<(), covbridge::BridgeError> {
    let sys = LinearSystem::new(
        MatrixFunction::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.5])),
        MatrixFunction::constant(DMatrix::from_row_slice(2, 1, &[0.0, 1.0])),
        1.0,
    )?;
    let m0 = GaussianMarginal::new(&DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]))?;
    let mt = GaussianMarginal::new(&DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.4]))?;
    let sol = solve_nonsingular(&sys, &m0, &mt, 1000)?;

    let fwd_cfg = SimulationConfig { paths: 10_000, seed: 3, ..Default::default() };
    let rev_cfg = SimulationConfig { direction: Direction::Reverse, ..fwd_cfg.clone() };
    let fwd = simulate_controlled(&sys, &sol, &fwd_cfg)?;
    let rev = simulate_reverse(&sys, &sol, &mt, &rev_cfg)?;

    println!("solver  Sigma(0.5) =\n{}", sol.sigma_at(0.5)?);
    println!("forward ensemble  =\n{}", fwd.cov_at(0.5).0);
    println!("reverse ensemble  =\n{}", rev.cov_at(0.5).0);
    println!("forward energy to T: {:.4}", fwd.energy.last().unwrap());
    Ok(())
}
