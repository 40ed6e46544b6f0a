//! Brownian bridge from the origin back to the origin, solved as a singular
//! bridge and sampled with the feedback law.

use covbridge::{simulate_controlled, solve_singular, GaussianMarginal, LinearSystem, MatrixFunction, SimulationConfig};
use nalgebra::DMatrix;

fn main() -> Result<(), covbridge::BridgeError> {
    let sys = LinearSystem::new(
        MatrixFunction::constant(DMatrix::zeros(1, 1)),
        MatrixFunction::constant(DMatrix::identity(1, 1)),
        1.0,
    )?;
    let dirac = GaussianMarginal::new(&DMatrix::zeros(1, 1))?;
    let sol = solve_singular(&sys, &dirac, &dirac, 1000, 1e-3)?;

    let cfg = SimulationConfig { paths: 5000, horizon_clip: 0.05, seed: 3, ..Default::default() };
    let ens = simulate_controlled(&sys, &sol, &cfg)?;

    println!("{:>6} {:>10} {:>10} {:>10}", "t", "t(1-t)", "solver", "sampled");
    for t in [0.1, 0.25, 0.5, 0.75, 0.9] {
        let (c, se) = ens.cov_at(t);
        println!(
            "{t:>6.2} {:>10.5} {:>10.5} {:>10.5} ± {:.5}",
            t * (1.0 - t),
            sol.sigma_at(t)?[(0, 0)],
            c[(0, 0)],
            se[(0, 0)]
        );
    }
    println!("gain at t = 0.5: {:.6} (expected -2)", sol.feedback_gain(0.5)?[(0, 0)]);
    Ok(())
}
