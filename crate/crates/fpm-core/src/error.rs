use thiserror::Error;

/// Error type shared by every module in the crate.
///
/// Variants map onto the CLI exit codes: `Config`, `Size`, and `Domain`
/// are usage/contract errors (exit 2), `Numeric` covers divergence and
/// degenerate fits (exit 3), `Io` and `Format` cover persistence (exit 4).
#[derive(Error, Debug)]
pub enum FpmError {
    #[error("config: {0}")]
    Config(String),
    #[error("size: {0}")]
    Size(String),
    #[error("domain: {0}")]
    Domain(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, FpmError>;

impl FpmError {
    /// Short machine-parsable category name, printed by the CLI as
    /// `error[<category>]: <message>`.
    pub fn category(&self) -> &'static str {
        match self {
            FpmError::Config(_) => "config",
            FpmError::Size(_) => "size",
            FpmError::Domain(_) => "domain",
            FpmError::Numeric(_) => "numeric",
            FpmError::Io(_) => "io",
            FpmError::Format(_) => "format",
        }
    }

    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            FpmError::Config(_) | FpmError::Size(_) | FpmError::Domain(_) => 2,
            FpmError::Numeric(_) => 3,
            FpmError::Io(_) | FpmError::Format(_) => 4,
        }
    }
}
