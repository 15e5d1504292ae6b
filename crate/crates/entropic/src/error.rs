//! Error type shared by lattice construction, solvers and optimizers.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Every failure mode names the violated precondition or invariant.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("jump intensity bound violated: sum(lambda_i * dt) = {sum_dt} must stay below 1")]
    IntensityTooLarge { sum_dt: f64 },

    #[error("jump intensities must be strictly positive, got {value} in channel {channel}")]
    NonpositiveIntensity { channel: usize, value: f64 },

    #[error("lattice with no Brownian coordinates and no jump channels requires single-path mode")]
    DegenerateLattice,

    #[error("dimension {dim} exceeds the supported maximum {max}")]
    DimensionTooLarge { dim: usize, max: usize },

    #[error("lattice would hold {nodes} nodes, above the limit {max}")]
    TreeTooLarge { nodes: u64, max: u64 },

    #[error("discount rate must be nonnegative, got {value}")]
    NegativeRate { value: f64 },

    #[error("discount rate is zero on some nodes but not all; zero-rate mode needs rate identically zero")]
    PartiallyZeroRate,

    #[error("Brownian tilt factor 1 + theta*b*sqrt(dt) = {factor} is not positive")]
    TiltTooLarge { factor: f64 },

    #[error("penalty weight beta must be positive, got {value}")]
    NonpositiveBeta { value: f64 },

    #[error("operation needs a solution from the {expected} scheme, got {got}")]
    SchemeMismatch {
        expected: &'static str,
        got: &'static str,
    },

    #[error("inputs are not ordered: (U1, terminal1) must dominate or be dominated node-by-node")]
    InputsNotOrdered,

    #[error("criteria are not comparable: penalty weights or discounting differ")]
    NotComparable,

    #[error("power utility exponent must lie strictly between 0 and 1, got {value}")]
    BadUtilityExponent { value: f64 },

    #[error("consumption and terminal payout must be strictly positive, got {value}")]
    NonpositivePlan { value: f64 },

    #[error("multiplier nu must be positive, got {value}")]
    NonpositiveNu { value: f64 },

    #[error("initial capital must be positive, got {value}")]
    NonpositiveCapital { value: f64 },

    #[error("iteration failed to converge after {iters} steps, last residual {residual}")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("root bracketing failed: budget map is not decreasing through the target on the searched range")]
    BracketFailure,

    #[error("volatility/jump loading matrix is singular or too ill-conditioned to invert")]
    SingularSigma,

    #[error("asset price became nonpositive ({value}) on some branch; shrink dt or coefficients")]
    NonpositivePrice { value: f64 },

    #[error("relative jump size phi = {value} must stay above -1")]
    BadJumpSize { value: f64 },

    #[error("jump risk premium leaves 1 + gamma = {value} nonpositive; log tilt undefined")]
    JumpPremiumOutOfRange { value: f64 },

    #[error("1 + alpha = {value} vanishes; the value decomposition is singular there")]
    Singular { value: f64 },

    #[error("this closed form needs a discount rate that depends on time only")]
    StateDependentRate,

    #[error("{what} is path-dependent and needs a non-recombining lattice")]
    RequiresTree { what: &'static str },

    #[error("process or data length {got} does not match the lattice ({expected})")]
    MismatchedLattice { got: usize, expected: usize },

    #[error("market jump intensity {got} disagrees with the lattice intensity {expected}; constant shared intensities are assumed")]
    IntensityMismatch { got: f64, expected: f64 },

    #[error("transition probabilities at node {node} sum to {sum}, not 1")]
    UnnormalizedMeasure { node: usize, sum: f64 },
}
