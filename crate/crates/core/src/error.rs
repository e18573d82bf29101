use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("basis index {index} out of range (valid 0..{count})")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("degenerate surface normal at (u={u}, v={v})")]
    DegenerateNormal { u: f64, v: f64 },

    #[error("insufficient points: need at least {needed}, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("degenerate parameterization: {0}")]
    DegenerateParameterization(String),

    #[error("singular least-squares system")]
    SingularSystem,

    #[error("empty prediction: no active control-point rows or columns")]
    EmptyPrediction,

    #[error("predicted control grid {rows}x{cols} is too small for a surface")]
    DegenerateGrid { rows: usize, cols: usize },

    #[error("degenerate neighborhood around point {0}")]
    DegenerateNeighborhood(usize),

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
