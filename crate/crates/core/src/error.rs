use thiserror::Error;

/// A value or input violated a documented invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("validation error: {message}")]
pub struct ValidationError {
    pub message: String,
}

impl ValidationError {
    pub fn new(message: impl Into<String>) -> Self {
        Self { message: message.into() }
    }
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("corrupt ledger at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("scenario invalid at {path}{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Invalid { path: String, line: Option<usize>, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A runtime safety invariant was breached during simulation.
#[derive(Debug, Clone, Error)]
#[error("invariant breach at t={time_ms} ms: {message}")]
pub struct InvariantBreach {
    pub time_ms: u64,
    pub message: String,
}
