use std::fmt;

/// Process exit codes.
pub const OK: u8 = 0;
pub const FAILURE: u8 = 1;
pub const USAGE: u8 = 2;
pub const BAD_CONTAINER: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl fmt::Display) -> Self {
        CliError {
            code,
            message: message.to_string(),
        }
    }

    /// Bad configuration, overrides or flags.
    pub fn config(e: impl fmt::Display) -> Self {
        Self::new(USAGE, e)
    }

    /// Dataset that cannot be loaded or used.
    pub fn data(e: impl fmt::Display) -> Self {
        Self::new(FAILURE, e)
    }

    /// Unreadable or malformed synthetic-set container.
    pub fn container(e: impl fmt::Display) -> Self {
        Self::new(BAD_CONTAINER, e)
    }

    pub fn runtime(e: impl fmt::Display) -> Self {
        Self::new(FAILURE, e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e)
    }
}
