use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by origin: input validation, operation preconditions,
/// solver/bisection failures, and synthesis refusals.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum ThermoError {
    #[error("inverse temperature must be a finite positive number, got {0}")]
    InvalidBeta(f64),
    #[error("hamiltonian needs at least one finite energy level")]
    AllLevelsInfinite,
    #[error("hamiltonian must be non-empty")]
    EmptyHamiltonian,
    #[error("energy {0} at level {1} is not a real number or -inf")]
    InvalidEnergy(f64, usize),
    #[error("population {0} at level {1} is negative")]
    NegativePopulation(f64, usize),
    #[error("populations sum to {0}, outside the normalization tolerance {1}")]
    NotNormalized(f64, f64),
    #[error("dimension mismatch: {0} energies vs {1} populations")]
    ShapeMismatch(usize, usize),
    #[error("inverse temperatures differ: {0} vs {1}")]
    BetaMismatch(f64, f64),
    #[error("partition functions differ beyond tolerance: {0} vs {1}")]
    PartitionMismatch(f64, f64),
    #[error("x = {0} lies outside the curve domain [0, {1}]")]
    OutOfDomain(f64, f64),
    #[error("lambda = {0} is outside [0, 1]")]
    InvalidLambda(f64),
    #[error("subset touches level {0} with infinite energy")]
    InfiniteLevelInSubset(usize),
    #[error("empty level subset")]
    EmptySubset,
    #[error("level index {0} out of range for {1} levels")]
    IndexOutOfRange(usize, usize),
    #[error("energy shift at level {0} is undefined (infinite minus infinite or -inf)")]
    UndefinedShift(usize),
    #[error("pitr requires two distinct finite levels, got j={0}, k={1}")]
    InvalidPitrPair(usize, usize),
    #[error("kappa = {0} must be non-negative")]
    InvalidKappa(f64),
    #[error("levels {0} and {1} do not form a non-elbow (keys {2} vs {3})")]
    NotANonElbow(usize, usize, f64, f64),
    #[error("energy cap {0} does not exceed the current level energy {1}")]
    CapTooLow(f64, f64),
    #[error("discard factor is correlated with the rest of the system (max deviation {0})")]
    CorrelatedDiscard(f64),
    #[error("discard factor {0:?} does not describe a trailing tensor factor of dimension dividing {1}")]
    BadDiscardFactor(Vec<usize>, usize),
    #[error("epsilon = {0} must lie in [0, 1)")]
    InvalidEpsilon(f64),
    #[error("work penalty {0} must be non-positive")]
    PositivePenalty(f64),
    #[error("ancilla gap {0} must be positive")]
    InvalidGap(f64),
    #[error("transition is infeasible: the input does not thermo-majorize the target")]
    Infeasible,
    #[error("states do not share a beta-order (position {0})")]
    OrderMismatch(usize),
    #[error("thermo-majorization curves touch at interior x = {0}")]
    CurvesTouch(f64),
    #[error("requested residual {requested} is unachievable at this energy cap; achievable bound {achievable}")]
    DeltaUnachievable { requested: f64, achievable: f64 },
    #[error("bisection bracket failure on [{0}, {1}]: feasibility at the ends is ({2}, {3})")]
    BracketFailure(f64, f64, bool, bool),
    #[error("dimension {0} exceeds the cap {1} for this oracle")]
    DimensionCap(usize, usize),
    #[error("simplex pivot limit reached after {0} pivots")]
    SimplexStall(usize),
    #[error("protocol op {0} is inconsistent with the running dimension {1}")]
    ProtocolDimension(usize, usize),
    #[error("internal synthesis invariant violated: {0}")]
    SynthesisInternal(String),
    #[error("json: {0}")]
    Json(String),
}

pub type Result<T> = std::result::Result<T, ThermoError>;
