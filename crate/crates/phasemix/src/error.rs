//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the phase-space, estimation, and bound machinery.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate action domain: {0}")]
    DegenerateDomain(String),

    #[error("wavevector k = 0 is not associated with a resonance hyperplane")]
    ZeroWaveVector,

    #[error("action {0:?} lies outside the action domain")]
    OutsideDomain(Vec<f64>),

    #[error("unknown builtin system `{0}`")]
    UnknownBuiltin(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("step-count guard exceeded: |t|/dt = {steps:.3e} > {guard:.1e}")]
    StepGuard { steps: f64, guard: f64 },

    #[error("non-finite state encountered at t = {t}")]
    NonFiniteState { t: f64 },

    #[error(
        "grid too coarse for oscillatory integral: need at least {required:?} nodes per axis, \
         grid has {got:?}"
    )]
    ResolutionGuard {
        required: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("singular phase: |grad phi| = {grad_norm:.3e} < {floor:.1e} at I = {at:?}")]
    SingularPhase {
        at: Vec<f64>,
        grad_norm: f64,
        floor: f64,
    },

    #[error("resonance-contaminated region: gamma_k <= {floor:.1e} for modes {offenders:?}; shrink the region or raise alpha")]
    ResonanceContaminated {
        offenders: Vec<Vec<i32>>,
        floor: f64,
    },

    #[error("small divisor |k.omega| = {value:.3e} below floor {floor:.1e} for k = {k:?} at I = {at:?}")]
    SmallDivisor {
        k: Vec<i32>,
        at: Vec<f64>,
        value: f64,
        floor: f64,
    },

    #[error("wavevector enumeration guard exceeded: {count} vectors with |k|_1 <= {order} (limit {guard})")]
    EnumerationGuard {
        count: u64,
        order: i32,
        guard: u64,
    },

    #[error("parameter schedule undefined: {0}")]
    ScheduleUndefined(String),

    #[error("rejection sampling acceptance rate {rate:.3e} below {floor:.1e}; density too peaked for the proposal")]
    AcceptanceTooLow { rate: f64, floor: f64 },

    #[error("normal-form margin too small: probe point left the domain ({0})")]
    MarginTooSmall(String),

    #[error("all tails are zero: fields are band-limited below the probed orders, no decay law to fit")]
    BandLimited,

    #[error("coordinate inconsistency: {0}")]
    CoordinateMismatch(String),

    #[error(
        "discretization unresolved: candidate bound violation at t = {t}, but the dt/2 check \
         shows integrator error {richardson:.3e} >= stderr {stderr:.3e}; rerun with smaller dt"
    )]
    DiscretizationUnresolved {
        t: f64,
        richardson: f64,
        stderr: f64,
    },

    #[error("certified sup-norm margin unattainable: {0}")]
    SupMargin(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
