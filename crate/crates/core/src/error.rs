use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("unknown profile `{name}`; valid profiles: {}", valid.join(", "))]
    UnknownProfile { name: String, valid: Vec<String> },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "solver did not converge for illumination {illumination} after {iterations} iterations \
         (final relative residual {final_residual:.3e})",
        final_residual = residual_history.last().copied().unwrap_or(f64::NAN)
    )]
    NonConvergence {
        illumination: usize,
        iterations: usize,
        residual_history: Vec<f64>,
    },

    #[error("series did not converge: {0}")]
    SeriesNonConvergence(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("cannot normalize: {0}")]
    ZeroNormalization(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("unsupported schema version {found} (expected {expected})")]
    UnsupportedSchema { found: u64, expected: u64 },

    #[error("missing incident-field measurements: {0}")]
    MissingIncident(String),

    #[error("epoch {epoch}: {source}")]
    Epoch {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png encoding failed: {0}")]
    Png(String),
}

impl Error {
    /// Process exit code for the command-line surface: 2 for invalid input
    /// (including missing input files), 3 for numerical failure, 1 for other
    /// I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Geometry(_)
            | Error::UnknownProfile { .. }
            | Error::ShapeMismatch(_)
            | Error::Domain(_)
            | Error::Config(_)
            | Error::Parse { .. }
            | Error::MissingColumn(_)
            | Error::UnsupportedSchema { .. }
            | Error::MissingIncident(_)
            | Error::Json(_) => 2,
            Error::NonConvergence { .. }
            | Error::SeriesNonConvergence(_)
            | Error::NonFinite(_)
            | Error::ZeroNormalization(_) => 3,
            Error::Epoch { source, .. } => source.exit_code(),
            Error::Io(e) if matches!(e.kind(), std::io::ErrorKind::NotFound | std::io::ErrorKind::InvalidData) => 2,
            Error::Io(_) | Error::Png(_) => 1,
        }
    }
}
