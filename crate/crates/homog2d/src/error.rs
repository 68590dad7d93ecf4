//! Crate-wide error type with module-qualified codes.

use thiserror::Error;

/// All failure modes of the toolkit, grouped by module.
///
/// Every variant's display string starts with a `module/Code` tag so that CLI
/// logs and strict-mode exits can be grepped by failure class.
#[derive(Debug, Error)]
pub enum Error {
    // ---- microstructure -------------------------------------------------
    #[error("microstructure/EllipticityViolation: smallest Rayleigh quotient {found:.6e} < claimed {claimed:.6e} at grid point ({i}, {j})")]
    EllipticityViolation {
        claimed: f64,
        found: f64,
        i: usize,
        j: usize,
    },
    #[error("microstructure/SymmetryViolation: |A^{{ab}}_ij - A^{{ba}}_ji| = {discrepancy:.6e} at grid point ({i}, {j})")]
    SymmetryViolation {
        discrepancy: f64,
        i: usize,
        j: usize,
    },
    #[error("microstructure/NonFiniteEntry: non-finite sample at grid point ({i}, {j})")]
    NonFiniteEntry { i: usize, j: usize },
    #[error("microstructure/NonConvergence: {context} stalled at relative residual {residual:.3e} after {iterations} iterations (tolerance {tolerance:.1e})")]
    NonConvergence {
        context: String,
        residual: f64,
        iterations: usize,
        tolerance: f64,
    },
    #[error("microstructure/NotDivergenceFree: discrete divergence {found:.3e} exceeds tolerance {tolerance:.1e}")]
    NotDivergenceFree { found: f64, tolerance: f64 },
    #[error("microstructure/NonZeroMean: field mean {found:.3e} exceeds tolerance {tolerance:.1e}")]
    NonZeroMean { found: f64, tolerance: f64 },
    #[error("microstructure/ResolutionMismatch: tensor sampled at n={expected} but correctors at n={found}")]
    ResolutionMismatch { expected: usize, found: usize },
    #[error("microstructure/UnknownPreset: no builtin tensor preset named '{name}'")]
    UnknownPreset { name: String },
    #[error("microstructure/BadTabulatedInput: {message}")]
    BadTabulatedInput { message: String },

    // ---- geometry --------------------------------------------------------
    #[error("geometry/NonConvex: vertex {vertex} lies strictly outside edge line {edge}")]
    NonConvex { vertex: usize, edge: usize },
    #[error("geometry/DegenerateEdge: edge {edge} has length {length:.3e} < 1e-12")]
    DegenerateEdge { edge: usize, length: f64 },
    #[error("geometry/TooFewVertices: polygon needs at least 3 vertices, got {found}")]
    TooFewVertices { found: usize },
    #[error("geometry/SlopeInfinite: edge normal has n2 = 0; swap axes before expanding the slope")]
    SlopeInfinite,

    // ---- fem ---------------------------------------------------------------
    #[error("fem/TargetTooFine: h_target {h_target:.3e} needs {needed} nodes, budget is {budget}")]
    TargetTooFine {
        h_target: f64,
        needed: usize,
        budget: usize,
    },
    #[error("fem/MeshQuality: minimum triangle angle {angle_deg:.2} deg < 20 deg")]
    MeshQuality { angle_deg: f64 },
    #[error("fem/QuadratureUnderResolved: mesh h = {h:.3e} > epsilon = {eps:.3e}; pass the override flag to proceed")]
    QuadratureUnderResolved { h: f64, eps: f64 },
    #[error("fem/SolverFailure: {context} stopped at relative residual {residual:.3e} after {iterations} iterations")]
    SolverFailure {
        context: String,
        residual: f64,
        iterations: usize,
    },
    #[error("fem/DimensionMismatch: {message}")]
    DimensionMismatch { message: String },

    // ---- spectral ----------------------------------------------------------
    #[error("spectral/ConvergenceFailure: eigenpair {index} residual {residual:.3e} exceeds {tolerance:.1e} after {iterations} Lanczos iterations")]
    EigenConvergenceFailure {
        index: usize,
        residual: f64,
        tolerance: f64,
        iterations: usize,
    },
    #[error("spectral/NonPositiveEigenvalue: harmonic mean undefined for value {value:.6e}")]
    NonPositiveEigenvalue { value: f64 },

    // ---- boundary_layer ------------------------------------------------
    #[error("boundary_layer/UnresolvedCell: {points_per_period} grid points per period < required {required}")]
    UnresolvedCell {
        points_per_period: usize,
        required: usize,
    },
    #[error("boundary_layer/NotRational: strip solves require a rational edge classification, got {found}")]
    NotRational { found: String },
    #[error("boundary_layer/StripTooShort: strip height {l:.3} < {factor} periods (P = {p:.3})")]
    StripTooShort { l: f64, p: f64, factor: f64 },
    #[error("boundary_layer/NoDecay: deviation profile rises by {rise:.1}% (tolerance 5%) between heights {z_lo:.3} and {z_hi:.3}")]
    NoDecay { rise: f64, z_lo: f64, z_hi: f64 },
    #[error("boundary_layer/NonCauchy: successive convergent tails differ by {found:.3e} > {tolerance:.1e} at depth {depth}")]
    NonCauchy {
        found: f64,
        tolerance: f64,
        depth: usize,
    },
    #[error("boundary_layer/MissingTail: no tail recorded for edge {edge}, direction {direction}")]
    MissingTail { edge: usize, direction: usize },
    #[error("boundary_layer/UnresolvedOscillation: mesh h = {h:.3e} does not resolve epsilon = {eps:.3e}")]
    UnresolvedOscillation { h: f64, eps: f64 },

    // ---- expansion ---------------------------------------------------------
    #[error("expansion/MissingCorrector: {which} required for order-{order} reconstruction")]
    MissingCorrector { which: String, order: usize },
    #[error("expansion/ClusterMismatch: {message}")]
    ClusterMismatch { message: String },
    #[error("expansion/TooFewRows: slope fit needs >= 3 rows, got {found}")]
    TooFewRows { found: usize },

    // ---- cli ----------------------------------------------------------------
    #[error("cli/ConfigParse: {path}: {message}")]
    ConfigParse { path: String, message: String },
    #[error("cli/EmptyReport: report '{quantity}' has no rows")]
    EmptyReport { quantity: String },
    #[error("cli/Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("cli/Serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
