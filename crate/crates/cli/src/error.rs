use std::fmt;

/// Failure categories with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Numeric(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Numeric(_) => "numeric",
            CliError::Other(_) => "other",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Numeric(m) | CliError::Other(m) => m,
        }
    }
}

/// `error[<category>]: <message>` on one line.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat: String = self.message().split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "error[{}]: {flat}", self.category())
    }
}

impl From<mfil::Error> for CliError {
    fn from(e: mfil::Error) -> Self {
        match e {
            mfil::Error::NumericFault { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}
