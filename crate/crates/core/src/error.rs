//! Error taxonomy shared by every module.
//!
//! Variants map onto the process exit codes used by the CLI entry points:
//! configuration problems exit with 2, data problems with 3, numeric
//! failures with 4, everything else with 1.

use std::fmt;

/// Framework-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    Dim(String),
    /// Expected a scalar (e.g. a loss) but got a higher-rank tensor.
    Rank(String),
    /// Class label out of range.
    Label(String),
    /// Tensor is not part of the active graph, or operands belong to
    /// different graphs.
    Connectivity(String),
    /// An operation produced NaN or Inf.
    NonFinite(String),
    /// Linear solve hit a non-positive pivot.
    Singular(String),
    /// Unknown architecture or method name.
    Registry(String),
    /// Support set does not cover every episode class as required.
    Coverage(String),
    /// Manifest cannot satisfy the requested way/shot/query.
    Capacity(String),
    /// A transform changed the sample shape.
    Transform(String),
    /// A hyperparameter is out of its valid range.
    Parameter(String),
    /// Invalid object state (unfitted head, corrupt checkpoint, ...).
    State(String),
    /// Manifest or feature file failed to parse.
    Load(String),
    /// Filesystem failure.
    Io(String),
    /// Configuration key unknown, missing, or of the wrong type.
    Config(String),
    /// Training aborted (diverged loss, ...).
    Training(String),
    /// Evaluation protocol violation (e.g. class overlap in cross-domain).
    Protocol(String),
}

impl Error {
    /// Exit code for CLI entry points: 0 success, 2 config, 3 data,
    /// 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            Config(_) | Registry(_) | Parameter(_) => 2,
            Load(_) | Io(_) | Capacity(_) | Coverage(_) | Protocol(_) => 3,
            NonFinite(_) | Singular(_) | Training(_) => 4,
            _ => 1,
        }
    }

    fn kind(&self) -> &'static str {
        use Error::*;
        match self {
            Dim(_) => "dimension error",
            Rank(_) => "rank error",
            Label(_) => "label error",
            Connectivity(_) => "connectivity error",
            NonFinite(_) => "non-finite value",
            Singular(_) => "singular system",
            Registry(_) => "registry error",
            Coverage(_) => "coverage error",
            Capacity(_) => "capacity error",
            Transform(_) => "transform error",
            Parameter(_) => "parameter error",
            State(_) => "state error",
            Load(_) => "load error",
            Io(_) => "i/o error",
            Config(_) => "config error",
            Training(_) => "training error",
            Protocol(_) => "protocol violation",
        }
    }

    fn message(&self) -> &str {
        use Error::*;
        match self {
            Dim(m) | Rank(m) | Label(m) | Connectivity(m) | NonFinite(m) | Singular(m)
            | Registry(m) | Coverage(m) | Capacity(m) | Transform(m) | Parameter(m)
            | State(m) | Load(m) | Io(m) | Config(m) | Training(m) | Protocol(m) => m,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
