use thiserror::Error;

/// Errors produced by the solvers, the simulator and the verification layer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum BridgeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric (asymmetry {residual:.3e} exceeds {tolerance:.1e})")]
    NotSymmetric { residual: f64, tolerance: f64 },

    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:.3e})")]
    NotPsd { eigenvalue: f64 },

    #[error("singular-gramian: reachability Gramian on [{t0}, {t1}] has eigenvalue ratio {ratio:.3e}")]
    SingularGramian { t0: f64, t1: f64, ratio: f64 },

    #[error("integration-failure: non-finite state at t = {t}")]
    IntegrationFailure { t: f64 },

    #[error("singular-covariance: {0} marginal is rank deficient, use the singular solver")]
    SingularCovariance(&'static str),

    #[error("numerical-failure: {0}")]
    NumericalFailure(String),

    #[error("escape-time: {which} lost invertibility at t = {t}")]
    EscapeTime { which: &'static str, t: f64 },

    #[error("premature-escape: {which} blew up at t = {t}, inside the clipped interval")]
    PrematureEscape { which: &'static str, t: f64 },

    #[error("basis-mismatch: covariance is not block diagonal (residual {residual:.3e})")]
    BasisMismatch { residual: f64 },

    #[error("out-of-range: t = {t} outside [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("clip-required: {0}")]
    ClipRequired(&'static str),

    #[error("invalid-config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, BridgeError>;
