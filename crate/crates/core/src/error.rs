use std::fmt;

use thiserror::Error;

use crate::schedule::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A convolution, machine, space or experiment description is malformed.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index out of bounds: {what} = {index} (limit {limit})")]
    Bounds {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    /// A tensor value does not fit the declared bit width, or a result would
    /// not fit its accumulator.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid schedule: {}", ViolationList(.0))]
    Schedule(Vec<Violation>),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("no knob in the space has more than one candidate value")]
    NoMutation,

    #[error("search space exhausted: every valid configuration has been measured")]
    Exhausted,

    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Broad failure category, used by the command-line front end to pick an
/// exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Validation,
    Exhaustion,
    Io,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Json { .. } => ErrorCategory::Config,
            Error::Exhausted => ErrorCategory::Exhaustion,
            Error::Io { .. } => ErrorCategory::Io,
            Error::Bounds { .. }
            | Error::Domain(_)
            | Error::Schedule(_)
            | Error::Argument(_)
            | Error::NoMutation
            | Error::DegenerateData(_)
            | Error::Alignment(_) => ErrorCategory::Validation,
        }
    }
}

struct ViolationList<'a>(&'a [Violation]);

impl fmt::Display for ViolationList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

pub(crate) fn bounds(what: &'static str, index: usize, limit: usize) -> Error {
    Error::Bounds { what, index, limit }
}
