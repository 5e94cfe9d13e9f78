use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// configuration problems (bad scenario files, invalid parameters) exit 2,
/// failed verdicts and verification exit 1.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent array or matrix dimensions.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A parameter outside its mathematical domain (e.g. `t_f <= 0`).
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid configuration: scenario files, specs, solver setup.
    #[error("configuration error: {0}")]
    Config(String),
    /// Numerical breakdown: non-finite state, solver cycle, dead sampler.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Artifact verification found an inconsistency.
    #[error("verification failure: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code: verification failures are reported as 1 (a failed
    /// check), everything else as 2 (the tool could not do its job).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Verification(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
