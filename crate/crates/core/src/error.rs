use thiserror::Error;

/// Errors produced by the estimation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (depth {depth:.6} m)")]
    PointBehindCamera { depth: f64 },

    #[error("operation requires a horizontal pose, got pitch {pitch:.6} rad")]
    NonHorizontalPose { pitch: f64 },

    #[error("distance must be positive, got {0}")]
    NonPositiveDistance(f64),

    #[error("building {0} has no corner in front of the camera")]
    NoVisibleCorner(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("pixel ({x}, {y}) is outside the {width}x{height} raster")]
    OutOfBounds {
        x: i64,
        y: i64,
        width: usize,
        height: usize,
    },

    #[error("triplet denominator is degenerate (|e_t - e_n|^2 = {0:e})")]
    DegenerateDenominator(f64),

    #[error("insufficient training data: {0}")]
    InsufficientData(String),

    #[error("classifier head has not been trained")]
    UntrainedHead,

    #[error("homography needs at least 4 correspondences, got {0}")]
    TooFewPoints(usize),

    #[error("degenerate point configuration: null space dimension {0}")]
    DegenerateConfiguration(usize),

    #[error("homography is singular")]
    SingularHomography,

    #[error("invalid camera pose: {0}")]
    InvalidPose(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("building {id}: {reason}")]
    InvalidFootprint { id: String, reason: String },

    #[error("invalid image data: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
