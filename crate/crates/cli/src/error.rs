use anticipation_core::Error;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or input files.
    #[error("{0}")]
    Usage(String),
    /// Failure while computing, e.g. divergence or an output write error.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divergence_is_a_runtime_failure() {
        assert_eq!(CliError::from(Error::NonFinite("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(Error::Invalid("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(Error::Checkpoint("x".into())).exit_code(), 2);
    }
}
