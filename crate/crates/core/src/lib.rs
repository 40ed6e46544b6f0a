//! Gaussian Schrödinger bridges for linear stochastic systems.
//!
//! Steers `dζ = A(t)ζ dt + B(t)u dt + B(t) dW` between two zero-mean Gaussian
//! marginals over `[0, T]`. Full-rank endpoint covariances are handled by
//! [`bridge_core`] (closed-form boundary values plus coupled Lyapunov
//! equations). Rank-deficient covariances are handled by [`bridge_singular`],
//! which evaluates the limits of those boundary values and integrates the
//! Riccati equations for `Q(t)⁻¹` and `P(t)⁻¹` up to their escape times.

pub mod bridge_core;
pub mod bridge_singular;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod ode;
pub mod psd;
pub mod simulate;
pub mod verify;

pub use bridge_core::{
    boundary_nonsingular, feedback_gain, integrate_lyapunov_pair, solve_nonsingular, BoundaryPair, BridgeSolution,
};
pub use bridge_singular::{
    boundary_structure, efg_blocks, pt_inverse_limit, q0_inverse_limit, singular_boundary, solve_singular,
    EfgBlocks, HatSigma, SingularBoundary,
};
pub use dynamics::{LinearSystem, MatrixFunction, Propagators, SystemOptions};
pub use error::{BridgeError, Result};
pub use psd::{make_marginal, perturb, psd_sqrt, GaussianMarginal};
pub use simulate::{
    energy_profile, simulate_controlled, simulate_reverse, simulate_uncontrolled, Direction, SimulationConfig,
    SimulationEnsemble,
};
pub use verify::{
    check_reciprocal, run_full_verification, sweep_epsilon, Check, CheckStatus, Ensembles, ReciprocalPair, VerificationConfig,
    VerificationReport,
};
