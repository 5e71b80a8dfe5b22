use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("quaternion has zero norm")]
    DegenerateQuaternion,

    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    ParseError {
        line: Option<usize>,
        message: String,
    },

    #[error("keypoint at ({p}, {q}) lies outside the {width}x{height} image")]
    OutOfBounds {
        p: f64,
        q: f64,
        width: u32,
        height: u32,
    },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error("trace was recorded at parameter version {trace}, parameters are at version {params}")]
    TraceMismatch { trace: u64, params: u64 },

    #[error("numerical error: {0}")]
    NumericalError(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(line: Option<usize>, message: impl Into<String>) -> Self {
        Error::ParseError {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
