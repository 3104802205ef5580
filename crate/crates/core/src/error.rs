use thiserror::Error;

/// Errors produced by the estimation pipeline.
///
/// Each variant belongs to one of the CLI's error classes (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("design matrix is rank deficient (rank {rank} < {p})")]
    RankDeficient { rank: usize, p: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("instance too large for enumeration: {0}")]
    Size(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn with_context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Process exit status for this error: 2 usage/schema, 3 data, 4 solver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::MissingColumn(_) | Error::Config(_) | Error::InvalidInput(_) => 2,
            Error::Data(_)
            | Error::InsufficientData(_)
            | Error::Degenerate(_)
            | Error::RankDeficient { .. }
            | Error::Io(_)
            | Error::Csv(_) => 3,
            Error::Singular(_)
            | Error::Precondition(_)
            | Error::Size(_) => 4,
            Error::Context { source, .. } => source.exit_code(),
        }
    }
}
