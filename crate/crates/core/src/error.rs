use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("reduction over an empty axis")]
    EmptyReduction,

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("unsupported dimension {0}: coupling needs two nonempty halves (d >= 2)")]
    UnsupportedDimension(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty sample set")]
    EmptyInput,

    #[error("unknown dataset kind `{0}`")]
    UnknownKind(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Malformed(String),

    /// `line` 0 marks a command-line override.
    #[error("config error at {} (key `{key}`): {msg}", if *line == 0 { "override".to_string() } else { format!("line {line}") })]
    Config { line: usize, key: String, msg: String },

    #[error("training aborted at step {step}: {source}")]
    TrainingAborted { step: usize, source: Box<Error> },

    #[error("beta {beta}: {source}")]
    Sweep { beta: f64, source: Box<Error> },
}

impl Error {
    /// True for failures caused by NaN/Inf or a diverging computation.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) => true,
            Error::TrainingAborted { .. } => true,
            Error::Sweep { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) | Error::Malformed(_) => true,
            Error::Sweep { source, .. } => source.is_io(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
