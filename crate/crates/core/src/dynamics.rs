//! Linear time-varying systems `dξ = A(t)ξ dt + B(t) dW`, their state-transition
//! matrices and the reachability / controllability Gramians.

use nalgebra::DMatrix;

use crate::error::{BridgeError, Result};
use crate::ode;
use crate::psd::{self, DEFAULT_RANK_TOL};

/// Default number of fixed integration steps over `[0, T]`.
pub const DEFAULT_STEPS: usize = 2000;

/// A matrix-valued function of time on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixFunction {
    Constant(DMatrix<f64>),
    /// Values on a uniform grid spanning `[0, horizon]`, linearly interpolated.
    Sampled { horizon: f64, values: Vec<DMatrix<f64>> },
}

impl MatrixFunction {
    pub fn constant(m: DMatrix<f64>) -> Self {
        MatrixFunction::Constant(m)
    }

    pub fn sampled(horizon: f64, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if values.len() < 2 {
            return Err(BridgeError::InvalidArgument("a sampled matrix function needs at least two nodes".into()));
        }
        if !(horizon > 0.0) {
            return Err(BridgeError::InvalidArgument("sampled grid horizon must be positive".into()));
        }
        let shape = values[0].shape();
        if values.iter().any(|v| v.shape() != shape) {
            return Err(BridgeError::Dimension("sampled matrix nodes have inconsistent shapes".into()));
        }
        Ok(MatrixFunction::Sampled { horizon, values })
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            MatrixFunction::Constant(m) => m.shape(),
            MatrixFunction::Sampled { values, .. } => values[0].shape(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, MatrixFunction::Constant(_))
    }

    /// Value at `t`; times outside the grid are clamped to its ends.
    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        match self {
            MatrixFunction::Constant(m) => m.clone(),
            MatrixFunction::Sampled { horizon, values } => {
                let last = values.len() - 1;
                let x = (t / horizon).clamp(0.0, 1.0) * last as f64;
                let i = (x.floor() as usize).min(last - 1);
                let w = x - i as f64;
                &values[i] * (1.0 - w) + &values[i + 1] * w
            }
        }
    }

    fn all_finite(&self) -> bool {
        match self {
            MatrixFunction::Constant(m) => ode::all_finite(m),
            MatrixFunction::Sampled { values, .. } => values.iter().all(ode::all_finite),
        }
    }
}

/// Integration and rank-detection settings shared by everything built on a system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemOptions {
    pub steps: usize,
    pub rank_tol: f64,
}

impl Default for SystemOptions {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, rank_tol: DEFAULT_RANK_TOL }
    }
}

#[derive(Debug, Clone)]
pub struct LinearSystem {
    a: MatrixFunction,
    b: MatrixFunction,
    horizon: f64,
    n: usize,
    m: usize,
    options: SystemOptions,
}

/// Transition matrix and Gramians over the full horizon, computed once.
#[derive(Debug, Clone)]
pub struct Propagators {
    /// `Φ(T, 0)`
    pub phi: DMatrix<f64>,
    /// `Φ(0, T)`
    pub phi_inv: DMatrix<f64>,
    /// `M(T, 0)`
    pub reach: DMatrix<f64>,
    pub reach_inv: DMatrix<f64>,
    /// `N(T, 0)`
    pub ctrl: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: MatrixFunction, b: MatrixFunction, horizon: f64) -> Result<Self> {
        Self::with_options(a, b, horizon, SystemOptions::default())
    }

    /// Builds the system and probes controllability on `[0,T]`, `[0,T/2]` and
    /// `[T/2,T]`. This is a spot check, not a proof of nonsingularity on every
    /// subinterval.
    pub fn with_options(a: MatrixFunction, b: MatrixFunction, horizon: f64, options: SystemOptions) -> Result<Self> {
        let sys = Self::unchecked(a, b, horizon, options)?;
        let t = sys.horizon;
        sys.reachability_gramian(t, 0.0)?;
        sys.reachability_gramian(0.5 * t, 0.0)?;
        sys.reachability_gramian(t, 0.5 * t)?;
        Ok(sys)
    }

    /// Builds the system with shape validation only (no controllability probe).
    pub fn unchecked(a: MatrixFunction, b: MatrixFunction, horizon: f64, options: SystemOptions) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(BridgeError::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        if options.steps < 2 {
            return Err(BridgeError::InvalidArgument("at least two integration steps are required".into()));
        }
        if !(options.rank_tol > 0.0 && options.rank_tol < 1.0) {
            return Err(BridgeError::InvalidArgument(format!("rank tolerance must lie in (0, 1), got {}", options.rank_tol)));
        }
        let (n, na) = a.shape();
        let (nb, m) = b.shape();
        if n == 0 || n != na {
            return Err(BridgeError::Dimension(format!("A must be square and nonempty, got {n}x{na}")));
        }
        if nb != n || m == 0 {
            return Err(BridgeError::Dimension(format!("B must be {n}xm with m >= 1, got {nb}x{m}")));
        }
        for (f, name) in [(&a, "A"), (&b, "B")] {
            if let MatrixFunction::Sampled { horizon: h, .. } = f {
                if (h - horizon).abs() > 1e-12 * horizon {
                    return Err(BridgeError::InvalidArgument(format!("{name} grid spans [0,{h}] but T = {horizon}")));
                }
            }
            if !f.all_finite() {
                return Err(BridgeError::InvalidArgument(format!("{name} has non-finite entries")));
            }
        }
        Ok(Self { a, b, horizon, n, m, options })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn options(&self) -> SystemOptions {
        self.options
    }

    pub fn rank_tol(&self) -> f64 {
        self.options.rank_tol
    }

    /// Integration step used by every fixed-step solve on this system.
    pub fn max_step(&self) -> f64 {
        self.horizon / self.options.steps as f64
    }

    pub fn drift(&self) -> &MatrixFunction {
        &self.a
    }

    pub fn input(&self) -> &MatrixFunction {
        &self.b
    }

    pub fn a_at(&self, t: f64) -> DMatrix<f64> {
        self.a.eval(t)
    }

    pub fn b_at(&self, t: f64) -> DMatrix<f64> {
        self.b.eval(t)
    }

    /// `B(t)B(t)'`
    pub fn bbt_at(&self, t: f64) -> DMatrix<f64> {
        let b = self.b.eval(t);
        &b * b.transpose()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let slack = 1e-12 * self.horizon;
        if !(t >= -slack && t <= self.horizon + slack) {
            return Err(BridgeError::OutOfRange { t, lo: 0.0, hi: self.horizon });
        }
        Ok(())
    }

    /// `Φ(t, s)`: solution of `dΦ/dt = A(t)Φ`, `Φ(s, s) = I`.
    pub fn state_transition(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        self.check_time(t)?;
        self.check_time(s)?;
        match &self.a {
            MatrixFunction::Constant(a) => {
                let phi = (a * (t - s)).exp();
                if !ode::all_finite(&phi) {
                    return Err(BridgeError::IntegrationFailure { t });
                }
                Ok(phi)
            }
            MatrixFunction::Sampled { .. } => self.state_transition_ode(t, s),
        }
    }

    /// `Φ(t, s)` by RK4 integration regardless of how `A` is stored.
    pub fn state_transition_ode(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        let steps = ode::substeps((t - s).abs(), self.max_step());
        if steps == 0 {
            return Ok(DMatrix::identity(self.n, self.n));
        }
        let rhs = |tau: f64, x: &DMatrix<f64>| self.a.eval(tau) * x;
        ode::integrate(&rhs, s, t, &DMatrix::identity(self.n, self.n), steps)
    }

    /// Single-interval transition used by the quadrature sweeps.
    fn short_transition(&self, t: f64, s: f64) -> DMatrix<f64> {
        match &self.a {
            MatrixFunction::Constant(a) => (a * (t - s)).exp(),
            MatrixFunction::Sampled { .. } => {
                let rhs = |tau: f64, x: &DMatrix<f64>| self.a.eval(tau) * x;
                ode::rk4_step(&rhs, s, &DMatrix::identity(self.n, self.n), t - s)
            }
        }
    }

    fn quadrature_nodes(&self, t1: f64, t0: f64) -> usize {
        let len = t1 - t0;
        let n = ((self.options.steps as f64 * len / self.horizon).ceil() as usize).max(16);
        n + (n % 2)
    }

    fn gramian_interval(&self, t1: f64, t0: f64) -> Result<()> {
        self.check_time(t0)?;
        self.check_time(t1)?;
        if !(t1 > t0) {
            return Err(BridgeError::InvalidArgument(format!("Gramian needs t0 < t1, got t0 = {t0}, t1 = {t1}")));
        }
        Ok(())
    }

    fn check_gramian(&self, g: DMatrix<f64>, t1: f64, t0: f64) -> Result<DMatrix<f64>> {
        if !ode::all_finite(&g) {
            return Err(BridgeError::IntegrationFailure { t: t1 });
        }
        let g = psd::symmetrize(&g);
        let eig = psd::SortedEigen::new(&g);
        let max = eig.values.max();
        let min = eig.values.min();
        let ratio = if max > 0.0 { min / max } else { 0.0 };
        if !(ratio > self.options.rank_tol) {
            return Err(BridgeError::SingularGramian { t0, t1, ratio });
        }
        Ok(g)
    }

    /// Reachability Gramian `M(t1,t0) = ∫ Φ(t1,τ)B(τ)B(τ)'Φ(t1,τ)' dτ`, by composite Simpson.
    pub fn reachability_gramian(&self, t1: f64, t0: f64) -> Result<DMatrix<f64>> {
        self.gramian_interval(t1, t0)?;
        let nodes = self.quadrature_nodes(t1, t0);
        let h = (t1 - t0) / nodes as f64;
        let mut phi: DMatrix<f64> = DMatrix::identity(self.n, self.n);
        let step = self.a.is_constant().then(|| self.short_transition(t1, t1 - h));
        let mut acc = DMatrix::zeros(self.n, self.n);
        // sweep τ from t1 down to t0, keeping Φ(t1, τ)
        for k in (0..=nodes).rev() {
            let tau = t0 + k as f64 * h;
            let pb: DMatrix<f64> = &phi * self.b.eval(tau);
            acc += (&pb * pb.transpose()) * simpson_weight(k, nodes);
            if k > 0 {
                let local = match &step {
                    Some(s) => s.clone(),
                    None => self.short_transition(tau, tau - h),
                };
                phi *= local;
            }
        }
        self.check_gramian(acc * (h / 3.0), t1, t0)
    }

    /// Controllability Gramian `N(t1,t0) = ∫ Φ(t0,τ)B(τ)B(τ)'Φ(t0,τ)' dτ`.
    pub fn controllability_gramian(&self, t1: f64, t0: f64) -> Result<DMatrix<f64>> {
        self.gramian_interval(t1, t0)?;
        let nodes = self.quadrature_nodes(t1, t0);
        let h = (t1 - t0) / nodes as f64;
        let mut phi: DMatrix<f64> = DMatrix::identity(self.n, self.n);
        let step = self.a.is_constant().then(|| self.short_transition(t0, t0 + h));
        let mut acc = DMatrix::zeros(self.n, self.n);
        // sweep τ from t0 up to t1, keeping Φ(t0, τ)
        for k in 0..=nodes {
            let tau = t0 + k as f64 * h;
            let pb: DMatrix<f64> = &phi * self.b.eval(tau);
            acc += (&pb * pb.transpose()) * simpson_weight(k, nodes);
            if k < nodes {
                let local = match &step {
                    Some(s) => s.clone(),
                    None => self.short_transition(tau, tau + h),
                };
                phi *= local;
            }
        }
        self.check_gramian(acc * (h / 3.0), t1, t0)
    }

    pub fn propagators(&self) -> Result<Propagators> {
        let t = self.horizon;
        let phi = self.state_transition(t, 0.0)?;
        let phi_inv = self.state_transition(0.0, t)?;
        let reach = self.reachability_gramian(t, 0.0)?;
        let reach_inv = psd::sym_inverse(&reach, self.options.rank_tol, "reachability Gramian")?;
        let ctrl = self.controllability_gramian(t, 0.0)?;
        Ok(Propagators { phi, phi_inv, reach, reach_inv, ctrl })
    }

    /// Exact propagation of `Ẋ = AX + XA' + sign·BB'` from `X(from)` to `to`,
    /// using `X(to) = Φ(to,from)X(from)Φ(to,from)' + sign·M(to,from)` (for
    /// `to > from`, and the inverse relation backwards).
    pub fn propagate_lyapunov(&self, x: &DMatrix<f64>, from: f64, to: f64, sign: f64) -> Result<DMatrix<f64>> {
        if (to - from).abs() == 0.0 {
            return Ok(x.clone());
        }
        if to > from {
            let phi = self.state_transition(to, from)?;
            let m = self.reachability_gramian(to, from)?;
            Ok(psd::symmetrize(&(&phi * x * phi.transpose() + m * sign)))
        } else {
            let phi = self.state_transition(to, from)?;
            let m = self.reachability_gramian(from, to)?;
            Ok(psd::symmetrize(&(&phi * (x - m * sign) * phi.transpose())))
        }
    }
}

fn simpson_weight(k: usize, nodes: usize) -> f64 {
    if k == 0 || k == nodes {
        1.0
    } else if k % 2 == 1 {
        4.0
    } else {
        2.0
    }
}

pub fn state_transition(sys: &LinearSystem, t: f64, s: f64) -> Result<DMatrix<f64>> {
    sys.state_transition(t, s)
}

pub fn reachability_gramian(sys: &LinearSystem, t1: f64, t0: f64) -> Result<DMatrix<f64>> {
    sys.reachability_gramian(t1, t0)
}

pub fn controllability_gramian(sys: &LinearSystem, t1: f64, t0: f64) -> Result<DMatrix<f64>> {
    sys.controllability_gramian(t1, t0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn double_integrator() -> LinearSystem {
        LinearSystem::new(
            MatrixFunction::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])),
            MatrixFunction::constant(DMatrix::from_row_slice(2, 1, &[0.0, 1.0])),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn nilpotent_transition() {
        let sys = double_integrator();
        let phi = sys.state_transition(1.0, 0.0).unwrap();
        assert!((phi - DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])).amax() < 1e-14);
        let back = sys.state_transition(0.0, 1.0).unwrap();
        assert!((back - DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 1.0])).amax() < 1e-14);
    }

    #[test]
    fn zero_drift_is_identity() {
        let sys = LinearSystem::new(
            MatrixFunction::constant(DMatrix::zeros(2, 2)),
            MatrixFunction::constant(DMatrix::identity(2, 2)),
            2.0,
        )
        .unwrap();
        assert!((sys.state_transition(1.7, 0.3).unwrap() - DMatrix::identity(2, 2)).amax() < 1e-15);
        let m = sys.reachability_gramian(2.0, 0.0).unwrap();
        assert!((m - DMatrix::identity(2, 2) * 2.0).amax() < 1e-13);
        let n = sys.controllability_gramian(1.0, 0.0).unwrap();
        assert!((n - DMatrix::identity(2, 2)).amax() < 1e-13);
    }

    #[test]
    fn degenerate_interval_rejected() {
        let sys = double_integrator();
        assert!(matches!(sys.reachability_gramian(0.5, 0.5), Err(BridgeError::InvalidArgument(_))));
        assert!(matches!(sys.state_transition(1.5, 0.0), Err(BridgeError::OutOfRange { .. })));
    }

    #[test]
    fn uncontrollable_system_rejected() {
        let err = LinearSystem::new(
            MatrixFunction::constant(DMatrix::zeros(2, 2)),
            MatrixFunction::constant(DMatrix::zeros(2, 1)),
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, BridgeError::SingularGramian { .. }));
        // B drives only the first coordinate and A does not couple them
        let err = LinearSystem::new(
            MatrixFunction::constant(DMatrix::zeros(2, 2)),
            MatrixFunction::constant(DMatrix::from_row_slice(2, 1, &[1.0, 0.0])),
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, BridgeError::SingularGramian { .. }));
    }

    #[test]
    fn shape_validation() {
        let bad = LinearSystem::new(
            MatrixFunction::constant(DMatrix::zeros(2, 3)),
            MatrixFunction::constant(DMatrix::zeros(2, 1)),
            1.0,
        );
        assert!(matches!(bad, Err(BridgeError::Dimension(_))));
        let bad = LinearSystem::new(
            MatrixFunction::constant(DMatrix::zeros(2, 2)),
            MatrixFunction::constant(DMatrix::zeros(3, 1)),
            1.0,
        );
        assert!(matches!(bad, Err(BridgeError::Dimension(_))));
        assert!(MatrixFunction::sampled(1.0, vec![DMatrix::zeros(2, 2)]).is_err());
    }

    #[test]
    fn sampled_interpolation() {
        let f = MatrixFunction::sampled(
            2.0,
            vec![DMatrix::from_element(1, 1, 0.0), DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 4.0)],
        )
        .unwrap();
        assert_eq!(f.eval(0.5)[(0, 0)], 0.5);
        assert_eq!(f.eval(1.5)[(0, 0)], 2.5);
        assert_eq!(f.eval(5.0)[(0, 0)], 4.0);
    }

    #[test]
    fn lyapunov_propagation_round_trip() {
        let sys = double_integrator();
        let x0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let x1 = sys.propagate_lyapunov(&x0, 0.0, 1.0, 1.0).unwrap();
        let back = sys.propagate_lyapunov(&x1, 1.0, 0.0, 1.0).unwrap();
        assert!((back - x0).amax() < 1e-12);
    }
}
