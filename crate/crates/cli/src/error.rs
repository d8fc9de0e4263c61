use thiserror::Error;

/// Exit code 2.
pub const EXIT_USAGE: i32 = 2;
/// Exit code 3.
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl From<priorseg::Error> for CliError {
    fn from(e: priorseg::Error) -> Self {
        use priorseg::Error as E;
        match e {
            E::InvalidParam { .. } | E::ArchitectureMismatch(_) | E::Json(_) => CliError::Usage(e.to_string()),
            // Undecodable images are rejected like malformed arguments.
            E::Image { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
