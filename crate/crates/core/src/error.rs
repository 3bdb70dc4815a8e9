use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graphon: {0}")]
    InvalidGraphon(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ambiguous truncation: |mu_{k}| and |mu_{next}| tie at {value}")]
    AmbiguousTruncation { k: usize, next: usize, value: f64 },

    #[error("coordinate ({x}, {y}) outside [0,1]^2")]
    OutOfRange { x: f64, y: f64 },

    #[error("degenerate spectrum: leading eigenvalue {0} is not positive")]
    DegenerateSpectrum(f64),

    #[error("eigensolver did not converge after {restarts} restarts ({converged} of {wanted} pairs converged)")]
    NoConvergence {
        restarts: usize,
        converged: usize,
        wanted: usize,
        partial: Vec<num_complex::Complex64>,
    },

    #[error("moment table of {entries} entries exceeds the cap of {cap}")]
    TableTooLarge { entries: usize, cap: usize },

    #[error("density fit is unusable: {0}")]
    UnusableFit(String),

    #[error("internal consistency violated: {0}")]
    Consistency(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("diagnostics unavailable: {0}")]
    DiagnosticsUnavailable(String),

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("config hash mismatch: stage input has {found}, current config is {expected}")]
    ConfigHashMismatch { found: String, expected: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
