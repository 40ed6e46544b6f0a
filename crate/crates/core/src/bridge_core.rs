//! Bridge between full-rank Gaussian marginals.
//!
//! The pair `(P, Q)` solves
//!
//! ```text
//! Ṗ = AP + PA' + BB',    Q̇ = AQ + QA' − BB',
//! Σ₀⁻¹ = P(0)⁻¹ + Q(0)⁻¹,  Σ_T⁻¹ = P(T)⁻¹ + Q(T)⁻¹,
//! ```
//!
//! the optimal feedback is `u = −B'Q⁻¹ξ` and the state covariance is
//! `Σ(t) = (P(t)⁻¹ + Q(t)⁻¹)⁻¹`. Both `Q(0)` and its dual `P(T)` have closed
//! forms, evaluated here exactly as written: inner square root first, then the
//! outer inverse, symmetrizing every symmetric intermediate.

use nalgebra::DMatrix;

use crate::bridge_singular::SingularBoundary;
use crate::dynamics::{LinearSystem, MatrixFunction, Propagators};
use crate::error::{BridgeError, Result};
use crate::ode;
use crate::psd::{self, symmetrize, GaussianMarginal};

/// Boundary values of the coupled Lyapunov pair.
#[derive(Debug, Clone)]
pub struct BoundaryPair {
    pub q0: DMatrix<f64>,
    pub p0: DMatrix<f64>,
    pub qt: DMatrix<f64>,
    pub pt: DMatrix<f64>,
}

impl BoundaryPair {
    /// `‖Σ₀⁻¹ − P0⁻¹ − Q0⁻¹‖ / ‖Σ₀⁻¹‖` and the same at `T` (max-abs norms).
    pub fn residuals(&self, m0: &GaussianMarginal, mt: &GaussianMarginal, tol: f64) -> Result<(f64, f64)> {
        let r = |sigma_inv: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>| -> Result<f64> {
            let pi = psd::sym_inverse(p, tol, "P")?;
            let qi = psd::sym_inverse(q, tol, "Q")?;
            Ok((sigma_inv - pi - qi).amax() / sigma_inv.amax())
        };
        Ok((r(m0.pinv(), &self.p0, &self.q0)?, r(mt.pinv(), &self.pt, &self.qt)?))
    }
}

/// `S^{1/2} (½I + S^{1/2} L S^{1/2} − (¼I + S^{1/2} R S^{1/2})^{1/2})⁻¹ S^{1/2}`
fn closed_form(sqrt: &DMatrix<f64>, lead: &DMatrix<f64>, inner: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let n = sqrt.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let root = psd::psd_sqrt_with_tol(&symmetrize(&(&id * 0.25 + sqrt * inner * sqrt)), tol)?;
    let middle = symmetrize(&(&id * 0.5 + sqrt * lead * sqrt - root));
    let middle_inv = psd::sym_inverse(&middle, tol, "closed-form middle factor")?;
    Ok(symmetrize(&(sqrt * middle_inv * sqrt)))
}

pub(crate) fn boundary_with(
    props: &Propagators,
    m0: &GaussianMarginal,
    mt: &GaussianMarginal,
    tol: f64,
) -> Result<BoundaryPair> {
    if m0.is_singular() {
        return Err(BridgeError::SingularCovariance("initial"));
    }
    if mt.is_singular() {
        return Err(BridgeError::SingularCovariance("terminal"));
    }
    let phi = &props.phi;
    let m_inv = &props.reach_inv;
    let lead0 = symmetrize(&(phi.transpose() * m_inv * phi));
    let inner0 = symmetrize(&(phi.transpose() * m_inv * mt.sigma() * m_inv * phi));
    let q0 = closed_form(m0.sqrt(), &lead0, &inner0, tol)?;
    let q0_inv = psd::sym_inverse(&q0, tol, "Q(0)")?;
    let p0 = psd::sym_inverse(&(m0.pinv() - q0_inv), tol, "Σ₀⁻¹ − Q(0)⁻¹")?;

    let inner_t = symmetrize(&(m_inv * phi * m0.sigma() * phi.transpose() * m_inv));
    let pt = closed_form(mt.sqrt(), m_inv, &inner_t, tol)?;
    let pt_inv = psd::sym_inverse(&pt, tol, "P(T)")?;
    let qt = psd::sym_inverse(&(mt.pinv() - pt_inv), tol, "Σ_T⁻¹ − P(T)⁻¹")?;
    Ok(BoundaryPair { q0, p0, qt, pt })
}

/// Closed-form `Q(0)`, `P(0)` and their duals `P(T)`, `Q(T)` for full-rank marginals.
pub fn boundary_nonsingular(sys: &LinearSystem, m0: &GaussianMarginal, mt: &GaussianMarginal) -> Result<BoundaryPair> {
    check_dims(sys, m0, mt)?;
    boundary_with(&sys.propagators()?, m0, mt, sys.rank_tol())
}

pub(crate) fn check_dims(sys: &LinearSystem, m0: &GaussianMarginal, mt: &GaussianMarginal) -> Result<()> {
    let n = sys.state_dim();
    if m0.dim() != n || mt.dim() != n {
        return Err(BridgeError::Dimension(format!(
            "marginals are {}x{} and {}x{} but the state dimension is {n}",
            m0.dim(),
            m0.dim(),
            mt.dim(),
            mt.dim()
        )));
    }
    Ok(())
}

/// Which endpoint marginals are degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EndpointFlags {
    pub initial: bool,
    pub terminal: bool,
}

/// Time grids of `Q(t)⁻¹`, `P(t)⁻¹`, `Σ(t)` and `K(t) = −B(t)'Q(t)⁻¹`.
///
/// `Q⁻¹` and the gain are absent at nodes past `T − δ_T` (they diverge at `T`
/// when `Σ_T` is singular); `P⁻¹` is absent before `δ₀`. `Σ` is present at
/// every node, the endpoints coming from the algebraic limits. Between nodes
/// every quantity is interpolated entrywise-linearly; invariants are only
/// asserted at nodes.
#[derive(Debug, Clone)]
pub struct BridgeSolution {
    pub(crate) grid: Vec<f64>,
    pub(crate) q_inv: Vec<Option<DMatrix<f64>>>,
    pub(crate) p_inv: Vec<Option<DMatrix<f64>>>,
    pub(crate) sigma: Vec<DMatrix<f64>>,
    pub(crate) gain: Vec<Option<DMatrix<f64>>>,
    pub(crate) singular: EndpointFlags,
    pub(crate) delta: f64,
    pub(crate) clearance: (f64, f64),
    pub(crate) boundary: SingularBoundary,
    pub(crate) input: MatrixFunction,
    pub(crate) endpoints: (DMatrix<f64>, DMatrix<f64>),
}

impl BridgeSolution {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().expect("solution grid is never empty")
    }

    pub fn state_dim(&self) -> usize {
        self.sigma[0].nrows()
    }

    pub fn q_inv(&self) -> &[Option<DMatrix<f64>>] {
        &self.q_inv
    }

    pub fn p_inv(&self) -> &[Option<DMatrix<f64>>] {
        &self.p_inv
    }

    pub fn sigma(&self) -> &[DMatrix<f64>] {
        &self.sigma
    }

    pub fn gain(&self) -> &[Option<DMatrix<f64>>] {
        &self.gain
    }

    pub fn singular_flags(&self) -> EndpointFlags {
        self.singular
    }

    /// Requested endpoint clearance.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Clearance actually applied at `(0, T)`: zero on a nonsingular side.
    pub fn clearance(&self) -> (f64, f64) {
        self.clearance
    }

    /// `Q(0)⁻¹`, `P(T)⁻¹`, `P(0)` and `Q(T)`.
    pub fn boundary(&self) -> &SingularBoundary {
        &self.boundary
    }

    /// The prescribed `(Σ₀, Σ_T)`.
    pub fn marginal_covariances(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.endpoints.0, &self.endpoints.1)
    }

    pub fn input(&self) -> &MatrixFunction {
        &self.input
    }

    /// Last time at which `Q(t)⁻¹` is available.
    pub fn q_valid_until(&self) -> f64 {
        self.horizon() - self.clearance.1
    }

    /// First time at which `P(t)⁻¹` is available.
    pub fn p_valid_from(&self) -> f64 {
        self.clearance.0
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let g = &self.grid;
        let last = g.len() - 1;
        let j = g.partition_point(|&x| x <= t).clamp(1, last);
        let i = j - 1;
        let w = ((t - g[i]) / (g[j] - g[i])).clamp(0.0, 1.0);
        (i, w)
    }

    fn interpolate(&self, nodes: &[Option<DMatrix<f64>>], t: f64, lo: f64, hi: f64) -> Result<DMatrix<f64>> {
        let slack = 1e-12 * self.horizon();
        if !(t >= lo - slack && t <= hi + slack) {
            return Err(BridgeError::OutOfRange { t, lo, hi });
        }
        let t = t.clamp(lo, hi);
        let (i, w) = self.locate(t);
        match (&nodes[i], &nodes[i + 1]) {
            (Some(a), Some(b)) => Ok(a * (1.0 - w) + b * w),
            (Some(a), None) if w <= 1e-9 => Ok(a.clone()),
            (None, Some(b)) if w >= 1.0 - 1e-9 => Ok(b.clone()),
            _ => Err(BridgeError::OutOfRange { t, lo, hi }),
        }
    }

    pub fn q_inv_at(&self, t: f64) -> Result<DMatrix<f64>> {
        self.interpolate(&self.q_inv, t, 0.0, self.q_valid_until())
    }

    pub fn p_inv_at(&self, t: f64) -> Result<DMatrix<f64>> {
        self.interpolate(&self.p_inv, t, self.p_valid_from(), self.horizon())
    }

    pub fn sigma_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let hi = self.horizon();
        let slack = 1e-12 * hi;
        if !(t >= -slack && t <= hi + slack) {
            return Err(BridgeError::OutOfRange { t, lo: 0.0, hi });
        }
        let (i, w) = self.locate(t.clamp(0.0, hi));
        Ok(&self.sigma[i] * (1.0 - w) + &self.sigma[i + 1] * w)
    }

    /// `K(t) = −B(t)'Q(t)⁻¹` with `Q⁻¹` interpolated between nodes.
    pub fn feedback_gain(&self, t: f64) -> Result<DMatrix<f64>> {
        let q_inv = self.q_inv_at(t)?;
        Ok(-(self.input.eval(t).transpose() * q_inv))
    }

    /// Index of the grid node closest to `t`.
    pub fn nearest_node(&self, t: f64) -> usize {
        let (i, w) = self.locate(t.clamp(0.0, self.horizon()));
        if w > 0.5 {
            i + 1
        } else {
            i
        }
    }
}

pub fn feedback_gain(sol: &BridgeSolution, t: f64) -> Result<DMatrix<f64>> {
    sol.feedback_gain(t)
}

fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|i| if i == steps { horizon } else { horizon * i as f64 / steps as f64 })
        .collect()
}

/// Integrates `(P, Q)` with RK4 across `grid`, starting from whichever end
/// `forward` selects, with sub-steps no longer than the system step.
fn integrate_pair(
    sys: &LinearSystem,
    grid: &[f64],
    p_start: &DMatrix<f64>,
    q_start: &DMatrix<f64>,
    forward: bool,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let lyap = |sign: f64| {
        move |t: f64, x: &DMatrix<f64>| {
            let a = sys.a_at(t);
            &a * x + x * a.transpose() + sys.bbt_at(t) * sign
        }
    };
    let p_rhs = lyap(1.0);
    let q_rhs = lyap(-1.0);
    let len = grid.len();
    let mut ps = vec![p_start.clone(); len];
    let mut qs = vec![q_start.clone(); len];
    let order: Vec<usize> = if forward { (0..len).collect() } else { (0..len).rev().collect() };
    for w in order.windows(2) {
        let (from, to) = (w[0], w[1]);
        let steps = ode::substeps((grid[to] - grid[from]).abs(), sys.max_step());
        ps[to] = symmetrize(&ode::integrate(&p_rhs, grid[from], grid[to], &ps[from], steps)?);
        qs[to] = symmetrize(&ode::integrate(&q_rhs, grid[from], grid[to], &qs[from], steps)?);
    }
    Ok((ps, qs))
}

fn assemble(
    sys: &LinearSystem,
    grid: Vec<f64>,
    ps: Vec<DMatrix<f64>>,
    qs: Vec<DMatrix<f64>>,
    bp: &BoundaryPair,
) -> Result<BridgeSolution> {
    let tol = sys.rank_tol();
    let mut q_inv = Vec::with_capacity(grid.len());
    let mut p_inv = Vec::with_capacity(grid.len());
    let mut sigma = Vec::with_capacity(grid.len());
    let mut gain = Vec::with_capacity(grid.len());
    for (k, &t) in grid.iter().enumerate() {
        let qi = psd::sym_inverse(&qs[k], tol, "Q(t)").map_err(|_| BridgeError::EscapeTime { which: "Q(t)", t })?;
        let pi = psd::sym_inverse(&ps[k], tol, "P(t)").map_err(|_| BridgeError::EscapeTime { which: "P(t)", t })?;
        let s = psd::sym_inverse(&(&pi + &qi), tol, "P(t)⁻¹ + Q(t)⁻¹")?;
        gain.push(Some(-(sys.b_at(t).transpose() * &qi)));
        q_inv.push(Some(qi));
        p_inv.push(Some(pi));
        sigma.push(s);
    }
    let boundary = SingularBoundary {
        q0_inv: psd::sym_inverse(&bp.q0, tol, "Q(0)")?,
        pt_inv: psd::sym_inverse(&bp.pt, tol, "P(T)")?,
        p0: bp.p0.clone(),
        qt: bp.qt.clone(),
    };
    let endpoints = (
        boundary_covariance(&bp.p0, &boundary.q0_inv)?,
        boundary_covariance(&bp.qt, &boundary.pt_inv)?,
    );
    Ok(BridgeSolution {
        grid,
        q_inv,
        p_inv,
        sigma,
        gain,
        singular: EndpointFlags::default(),
        delta: 0.0,
        clearance: (0.0, 0.0),
        boundary,
        input: sys.input().clone(),
        endpoints,
    })
}

/// `X (I + Y X)⁻¹` evaluated as the solution of `(I + X Y) Z = X`.
pub(crate) fn boundary_covariance(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let lhs = DMatrix::<f64>::identity(n, n) + x * y;
    lhs.lu()
        .solve(x)
        .map(|z| symmetrize(&z))
        .ok_or_else(|| BridgeError::NumericalFailure("I + P Q⁻¹ is singular at an endpoint".into()))
}

/// Carries `(P, Q)` from `from` to `to` (either direction) with RK4.
pub fn propagate_pair(
    sys: &LinearSystem,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    from: f64,
    to: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let grid = [from, to];
    let (ps, qs) = integrate_pair(sys, &grid, p, q, true)?;
    Ok((ps[1].clone(), qs[1].clone()))
}

/// Integrates `(P, Q)` forward from `(P(0), Q(0))` on a uniform grid with `steps` intervals.
pub fn integrate_lyapunov_pair(sys: &LinearSystem, bp: &BoundaryPair, steps: usize) -> Result<BridgeSolution> {
    if steps < 2 {
        return Err(BridgeError::InvalidArgument("at least two grid steps are required".into()));
    }
    let grid = uniform_grid(sys.horizon(), steps);
    let (ps, qs) = integrate_pair(sys, &grid, &bp.p0, &bp.q0, true)?;
    assemble(sys, grid, ps, qs, bp)
}

/// Same as [`integrate_lyapunov_pair`] but integrating backward from `(P(T), Q(T))`.
pub fn integrate_lyapunov_pair_backward(sys: &LinearSystem, bp: &BoundaryPair, steps: usize) -> Result<BridgeSolution> {
    if steps < 2 {
        return Err(BridgeError::InvalidArgument("at least two grid steps are required".into()));
    }
    let grid = uniform_grid(sys.horizon(), steps);
    let (ps, qs) = integrate_pair(sys, &grid, &bp.pt, &bp.qt, false)?;
    assemble(sys, grid, ps, qs, bp)
}

/// Solves the full-rank problem end to end.
pub fn solve_nonsingular(
    sys: &LinearSystem,
    m0: &GaussianMarginal,
    mt: &GaussianMarginal,
    steps: usize,
) -> Result<BridgeSolution> {
    let bp = boundary_nonsingular(sys, m0, mt)?;
    integrate_lyapunov_pair(sys, &bp, steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn brownian_like(n: usize) -> LinearSystem {
        LinearSystem::new(
            MatrixFunction::constant(DMatrix::zeros(n, n)),
            MatrixFunction::constant(DMatrix::identity(n, n)),
            1.0,
        )
        .unwrap()
    }

    fn golden() -> (f64, f64) {
        let s5 = 5f64.sqrt();
        ((3.0 + s5) / 2.0, (1.0 + s5) / 2.0)
    }

    #[test]
    fn identity_marginals_closed_form() {
        let sys = brownian_like(2);
        let id = make(DMatrix::identity(2, 2));
        let bp = boundary_nonsingular(&sys, &id, &id).unwrap();
        let (q0, p0) = golden();
        assert!((&bp.q0 - DMatrix::identity(2, 2) * q0).amax() < 1e-12);
        assert!((&bp.p0 - DMatrix::identity(2, 2) * p0).amax() < 1e-12);
        // time symmetry of this instance
        assert!((&bp.pt - &bp.q0).amax() < 1e-12);
        assert!((&bp.qt - &bp.p0).amax() < 1e-12);
        let (r0, rt) = bp.residuals(&id, &id, 1e-10).unwrap();
        assert!(r0 < 1e-12 && rt < 1e-12);
    }

    fn make(s: DMatrix<f64>) -> GaussianMarginal {
        GaussianMarginal::new(&s).unwrap()
    }

    #[test]
    fn identity_marginals_trajectory() {
        let sys = brownian_like(2);
        let id = make(DMatrix::identity(2, 2));
        let bp = boundary_nonsingular(&sys, &id, &id).unwrap();
        let sol = integrate_lyapunov_pair(&sys, &bp, 100).unwrap();
        let (q0, p0) = golden();
        for (k, &t) in sol.grid().iter().enumerate() {
            let q = psd::sym_inverse(sol.q_inv()[k].as_ref().unwrap(), 1e-12, "q").unwrap();
            let p = psd::sym_inverse(sol.p_inv()[k].as_ref().unwrap(), 1e-12, "p").unwrap();
            assert!((q - DMatrix::identity(2, 2) * (q0 - t)).amax() < 1e-10);
            assert!((p - DMatrix::identity(2, 2) * (p0 + t)).amax() < 1e-10);
        }
        assert!((&sol.sigma()[0] - DMatrix::identity(2, 2)).amax() < 1e-8);
        assert!((sol.sigma().last().unwrap() - DMatrix::identity(2, 2)).amax() < 1e-8);
        let k0 = sol.feedback_gain(0.0).unwrap();
        let expected = -(3.0 - 5f64.sqrt()) / 2.0;
        assert!((k0 - DMatrix::identity(2, 2) * expected).amax() < 1e-12);
    }

    #[test]
    fn gain_rows_vanish_with_zero_input_rows() {
        let sys = LinearSystem::new(
            MatrixFunction::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])),
            MatrixFunction::constant(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0])),
            1.0,
        )
        .unwrap();
        let m0 = make(DMatrix::identity(2, 2));
        let mt = make(DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0])));
        let sol = solve_nonsingular(&sys, &m0, &mt, 50).unwrap();
        for t in [0.0, 0.3, 0.77, 1.0] {
            let k = sol.feedback_gain(t).unwrap();
            assert_eq!(k.row(0).amax(), 0.0);
            assert!(k.row(1).amax() > 0.0);
        }
        assert!(sol.feedback_gain(1.5).is_err());
    }

    #[test]
    fn singular_marginal_is_rejected() {
        let sys = brownian_like(2);
        let s = make(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])));
        let id = make(DMatrix::identity(2, 2));
        assert!(matches!(boundary_nonsingular(&sys, &s, &id), Err(BridgeError::SingularCovariance("initial"))));
        assert!(matches!(boundary_nonsingular(&sys, &id, &s), Err(BridgeError::SingularCovariance("terminal"))));
        let small = make(DMatrix::identity(3, 3));
        assert!(matches!(boundary_nonsingular(&sys, &small, &id), Err(BridgeError::Dimension(_))));
    }

    #[test]
    fn too_few_steps_rejected() {
        let sys = brownian_like(1);
        let id = make(DMatrix::identity(1, 1));
        let bp = boundary_nonsingular(&sys, &id, &id).unwrap();
        assert!(integrate_lyapunov_pair(&sys, &bp, 1).is_err());
    }
}
