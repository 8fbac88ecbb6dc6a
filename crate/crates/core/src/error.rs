use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown map glyph {glyph:?} at row {row}, column {col}")]
    UnknownGlyph { glyph: char, row: usize, col: usize },
    #[error("map has no free cell")]
    NoFreeCell,
    #[error("teleport pad {0} has no valid link")]
    UnlinkedPad(u8),
    #[error("border cell ({0}, {1}) is not a wall")]
    OpenBorder(usize, usize),
    #[error("malformed map text: {0}")]
    MapSyntax(String),
    #[error("point ({0}, {1}) lies outside the map")]
    OutOfBounds(f64, f64),
    #[error("could not sample a reachable goal after {0} attempts")]
    UnreachableGoalSample(usize),
    #[error("goal ({0}, {1}) lies inside a wall")]
    GoalInWall(f64, f64),
    #[error("region is not entirely free")]
    RegionNotFree,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("negative input {0} to a distance transform")]
    NegativeInput(f64),
    #[error("objective variant {variant} cannot train on {regime} data")]
    VariantDataMismatch { variant: String, regime: String },
    #[error("non-finite loss in phase {phase} at step {step}")]
    NaNDetected {
        phase: String,
        step: u64,
        /// JSON dump of the offending batch.
        batch: String,
    },
    #[error("operation requires a {expected} agent, checkpoint holds {got}")]
    WrongAgentKind { expected: String, got: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed binary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
