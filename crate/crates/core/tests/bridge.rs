mod common;

use common::*;
use covbridge::{
    boundary_nonsingular, boundary_structure, efg_blocks, pt_inverse_limit, q0_inverse_limit, singular_boundary,
    solve_nonsingular, solve_singular, BridgeError, GaussianMarginal,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn marginal(s: &DMatrix<f64>) -> GaussianMarginal {
    GaussianMarginal::new(s).unwrap()
}

#[test]
fn brownian_bridge_solution() {
    let sys = brownian(1);
    let zero = diag(&[0.0]);
    let sol = solve_singular(&sys, &zero, &zero, 1000, 1e-3).unwrap();
    for (i, &t) in sol.grid().iter().enumerate() {
        assert!((sol.sigma()[i][(0, 0)] - t * (1.0 - t)).abs() < 1e-8, "t={t}");
        if t <= 0.99 {
            let q = sol.q_inv()[i].as_ref().unwrap()[(0, 0)];
            assert!((q - 1.0 / (1.0 - t)).abs() < 1e-6);
        }
    }
    let k = sol.feedback_gain(0.5).unwrap();
    assert!((k[(0, 0)] + 2.0).abs() < 1e-6);
}

#[test]
fn inertial_bridge_meets_both_marginals() {
    let sys = inertial();
    let (m0, mt) = inertial_marginals();
    let sb = singular_boundary(&sys, &m0, &mt).unwrap();
    assert!((sb.initial_covariance().unwrap() - m0.sigma()).amax() < 1e-10);
    assert!((sb.terminal_covariance().unwrap() - mt.sigma()).amax() < 1e-10);
    for c in boundary_structure(&sb, &m0, &mt) {
        assert!(c.passed(), "{} residual {:?}", c.name, c.residual);
    }
    let efg = efg_blocks(&sys, &m0, &mt).unwrap();
    assert!(efg.max_eigenvalue() < 0.0);
    assert!(efg.fixed_point_residuals().iter().all(|r| *r < 1e-10));
}

#[test]
fn nonsingular_solver_rejects_rank_deficient_marginal() {
    let (m0, mt) = inertial_marginals();
    let err = boundary_nonsingular(&inertial(), &m0, &mt).unwrap_err();
    assert!(matches!(err, BridgeError::SingularCovariance(_)));
}

#[test]
fn rotated_singular_marginals_are_met() {
    for seed in 0..6 {
        let (sys, m0, mt) = rotated_rank_one_pair(seed);
        let sol = solve_singular(&sys, &m0, &mt, 1000, 1e-3).unwrap();
        let first = &sol.sigma()[0];
        let last = sol.sigma().last().unwrap();
        assert!((first - m0.sigma()).amax() < 1e-9, "seed {seed}");
        assert!((last - mt.sigma()).amax() < 1e-9, "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, max_global_rejects: 8192, ..ProptestConfig::default() })]

    #[test]
    fn nonsingular_boundary_identities(seed in any::<u64>(), n in 1usize..5) {
        let mut r = rng(seed);
        let sys = random_system(n, n.div_ceil(2), &mut r);
        prop_assume!(gramian_condition(&sys) < 1e2);
        let m0 = marginal(&random_spd(n, &mut r));
        let mt = marginal(&random_spd(n, &mut r));
        let bp = boundary_nonsingular(&sys, &m0, &mt).unwrap();
        let (r0, rt) = bp.residuals(&m0, &mt, 1e-14).unwrap();
        prop_assert!(r0 < 1e-8 && rt < 1e-8, "{r0} {rt}");

        // Forward and backward propagation of the Lyapunov pair agree at the far end.
        let phi = sys.state_transition(1.0, 0.0).unwrap();
        let reach = sys.reachability_gramian(1.0, 0.0).unwrap();
        let eq = rel(&(&phi * &bp.q0 * phi.transpose() - &reach), &bp.qt);
        let ep = rel(&(&phi * &bp.p0 * phi.transpose() + &reach), &bp.pt);
        prop_assert!(eq.max(ep) < 1e-8, "{eq:e} {ep:e}");

        // The same boundary values come out of the limit formulas at full rank.
        let lq = rel(&q0_inverse_limit(&sys, &m0, &mt).unwrap(), &inv(&bp.q0));
        let lp = rel(&pt_inverse_limit(&sys, &m0, &mt).unwrap(), &inv(&bp.pt));
        // Both routes lose digits with the conditioning of the matrix being inverted.
        let kq = (bp.q0.norm() * inv(&bp.q0).norm() / 1e3).max(1.0);
        let kp = (bp.pt.norm() * inv(&bp.pt).norm() / 1e3).max(1.0);
        prop_assert!(lq < 1e-8 * kq && lp < 1e-8 * kp, "{lq:e} {lp:e} {kq:e} {kp:e}");
    }

    #[test]
    fn nonsingular_trajectory_interpolates_marginals(seed in any::<u64>(), n in 1usize..4) {
        let mut r = rng(seed);
        let sys = random_system(n, n, &mut r);
        prop_assume!(gramian_condition(&sys) < 1e2);
        let s0 = random_spd(n, &mut r);
        let st = random_spd(n, &mut r);
        let sol = solve_nonsingular(&sys, &marginal(&s0), &marginal(&st), 200).unwrap();
        let e0 = rel(&sol.sigma()[0], &s0);
        let et = rel(sol.sigma().last().unwrap(), &st);
        prop_assert!(e0 < 1e-8 && et < 1e-8, "{e0:e} {et:e}");
    }

    #[test]
    fn singular_boundary_invariants(seed in any::<u64>(), n in 2usize..5, k0 in 0usize..4, kt in 0usize..4) {
        let (k0, kt) = (k0.min(n - 1), kt.min(n - 1));
        let mut r = rng(seed);
        let sys = random_system(n, 1.max(n / 2), &mut r);
        prop_assume!(gramian_condition(&sys) < 1e2);
        let m0 = marginal(&random_psd_rank(n, k0, &mut r));
        let mt = marginal(&random_psd_rank(n, kt, &mut r));
        let sb = singular_boundary(&sys, &m0, &mt).unwrap();

        // Q(0)⁻¹ and P(T)⁻¹ are exact inverses of a propagated Lyapunov pair.
        let phi = sys.state_transition(1.0, 0.0).unwrap();
        let reach = sys.reachability_gramian(1.0, 0.0).unwrap();
        let qt = &phi * inv(&sb.q0_inv) * phi.transpose() - &reach;
        prop_assert!((qt - &sb.qt).amax() < 1e-7 * reach.amax().max(1.0));

        let scale0 = m0.sigma().amax().max(1.0);
        let scalet = mt.sigma().amax().max(1.0);
        prop_assert!((sb.initial_covariance().unwrap() - m0.sigma()).amax() < 1e-8 * scale0);
        prop_assert!((sb.terminal_covariance().unwrap() - mt.sigma()).amax() < 1e-8 * scalet);
        for c in boundary_structure(&sb, &m0, &mt) {
            prop_assert!(c.passed(), "{} residual {:?}", c.name, c.residual);
        }

        let efg = efg_blocks(&sys, &m0, &mt).unwrap();
        prop_assert_eq!(efg.rank(), k0);
        // E ≺ 0 needs the leading block of Σ̂_T to be definite, which fails when rank Σ_T < rank Σ₀.
        let he = efg.hat_t.view((0, 0), (k0, k0)).into_owned();
        if k0 > 0 && he.symmetric_eigenvalues().min() > 1e-8 {
            prop_assert!(efg.e_max_eigenvalue() < 0.0);
        } else {
            prop_assert!(efg.e_max_eigenvalue() < 1e-10);
        }
        prop_assert!(efg.max_eigenvalue() < 1e-10 * efg.hat_t.amax().max(1.0), "{}", efg.max_eigenvalue());
        prop_assert!(efg.fixed_point_residuals().iter().all(|x| *x < 1e-8), "{:?}", efg.fixed_point_residuals());
        // Assembled blocks rotate back to Q(0)⁻¹ − Φ'M⁻¹Φ.
        let expected = &sb.q0_inv - phi.transpose() * inv(&reach) * &phi;
        prop_assert!((efg.in_original_basis() - &expected).amax() < 1e-7 * expected.amax().max(1.0));
    }

    #[test]
    fn perturbed_marginals_converge_to_limit(seed in any::<u64>()) {
        let (sys, m0, mt) = rotated_rank_one_pair(seed);
        let limit = q0_inverse_limit(&sys, &m0, &mt).unwrap();
        let mut errors = Vec::new();
        for eps in [1e-3, 1e-4, 1e-5, 1e-6] {
            let p0 = marginal(&m0.perturb(eps).unwrap());
            let pt = marginal(&mt.perturb(eps).unwrap());
            let bp = boundary_nonsingular(&sys, &p0, &pt).unwrap();
            errors.push(rel(&inv(&bp.q0), &limit));
        }
        // Monotone and first order in ε.
        prop_assert!(errors.windows(2).all(|w| w[1] < 0.2 * w[0]), "{errors:?}");
        prop_assert!(errors[3] < 1e-3, "{errors:?}");
    }
}
