//! Inertial particles whose position spread narrows from 1 to 0.2 while the
//! velocity is pinned to zero at both ends.

use covbridge::{
    efg_blocks, simulate_controlled, solve_singular, GaussianMarginal, LinearSystem, MatrixFunction, SimulationConfig,
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
    let sb = sol.boundary();
    println!("Q(0)^-1 =\n{}P(T)^-1 =\n{}", sb.q0_inv, sb.pt_inv);
    let blocks = efg_blocks(&sys, &m0, &mt)?;
    println!("largest eigenvalue of [[E,F],[F',G]]: {:.3e}", blocks.max_eigenvalue());

    let cfg = SimulationConfig { paths: 10_000, step: 5e-4, horizon_clip: 0.05, seed: 42, ..Default::default() };
    let ens = simulate_controlled(&sys, &sol, &cfg)?;
    println!("{:>6} {:>10} {:>10} {:>10}", "t", "var_x", "sampled", "var_v");
    for t in [0.0, 0.25, 0.5, 0.75, 0.95] {
        let s = sol.sigma_at(t)?;
        let (c, _) = ens.cov_at(t);
        println!("{t:>6.2} {:>10.5} {:>10.5} {:>10.5}", s[(0, 0)], c[(0, 0)], s[(1, 1)]);
    }
    Ok(())
}
