use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_VIOLATED: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] gmlab_core::Error),

    #[error("usage error: {0}")]
    Usage(String),

    /// Outputs were written but a verification threshold was not met.
    #[error("verification violated: {0}")]
    Violated(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Core(e.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Core(e.into())
    }
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        use gmlab_core::Error as C;
        match self {
            Error::Usage(_) => EXIT_CONFIG,
            Error::Violated(_) => EXIT_VIOLATED,
            Error::Core(e) => match e {
                C::Numerical(_) | C::Integration(_) | C::Evaluation(_) | C::Singularity(_) => EXIT_NUMERICAL,
                C::Domain(_)
                | C::ScheduleInconsistency(_)
                | C::Validation(_)
                | C::Config(_)
                | C::Parse { .. }
                | C::Io(_)
                | C::Json(_) => EXIT_CONFIG,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            EXIT_VIOLATED => "verification",
            EXIT_NUMERICAL => "numerical",
            _ => "config",
        }
    }
}
