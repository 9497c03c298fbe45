use std::fmt;

/// Classifies failures so callers (and the CLI exit-code mapping) can tell
/// bad input apart from numerical breakdown and I/O trouble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Rejected input: bad config values, malformed files, out-of-range arguments.
    Validation,
    /// Shape or dimension mismatch between tensors that should agree.
    Size,
    /// API misuse: stale traces, missing adapters, calls out of order.
    Contract,
    /// Numerical breakdown: non-finite values, failed decompositions.
    Numeric,
    /// A quantity that must be invertible or strictly positive was not.
    Singular,
    /// Filesystem or serialization failure.
    Io,
}

#[derive(Debug)]
pub struct Error {
    pub kind: ErrorKind,
    pub message: String,
    source: Option<Box<dyn std::error::Error + Send + Sync>>,
}

impl Error {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Error { kind, message: message.into(), source: None }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Validation, message)
    }

    pub fn size(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Size, message)
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Contract, message)
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Numeric, message)
    }

    pub fn singular(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Singular, message)
    }

    pub fn io(message: impl Into<String>, source: std::io::Error) -> Self {
        Error { kind: ErrorKind::Io, message: message.into(), source: Some(Box::new(source)) }
    }

    /// Process exit code used by the CLI: 2 for rejected input, 3 for
    /// numerical failure, 4 for I/O failure.
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation | ErrorKind::Size | ErrorKind::Contract => 2,
            ErrorKind::Numeric | ErrorKind::Singular => 3,
            ErrorKind::Io => 4,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.kind {
            ErrorKind::Validation => "validation",
            ErrorKind::Size => "size",
            ErrorKind::Contract => "contract",
            ErrorKind::Numeric => "numeric",
            ErrorKind::Singular => "singular",
            ErrorKind::Io => "io",
        };
        write!(f, "{label} error: {}", self.message)
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        self.source.as_deref().map(|e| e as _)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
