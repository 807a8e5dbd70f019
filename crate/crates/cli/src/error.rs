use std::fmt;

use bunching::BunchingError;

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or inconsistent configuration.
    Config(String),
    Core(BunchingError),
    Io(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if !e.is_data_error() => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Core(e) => e.fmt(f),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<BunchingError> for CliError {
    fn from(e: BunchingError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_split_data_from_numerics() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(BunchingError::Data("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(BunchingError::Numerical("x".into())).exit_code(), 3);
        assert_eq!(CliError::Core(BunchingError::NonConvergence { iterations: 3, residual: 1.0 }).exit_code(), 3);
    }
}
