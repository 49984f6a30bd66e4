use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A Runge-Kutta stage (1..=4) produced a non-finite value.
    #[error("non-finite value in RK4 stage {stage}{}", step.map(|s| format!(" at rollout step {s}")).unwrap_or_default())]
    Integration { stage: usize, step: Option<usize> },

    #[error("invalid data in record {record}: {reason}")]
    Validation { record: usize, reason: String },

    #[error("eigensolver failure: {0}")]
    Eigen(String),

    #[error("relaxation failed: {0}")]
    Relaxation(String),

    #[error("no integral control sequence satisfies the state bound")]
    Infeasible,

    #[error("controller failed: {0}")]
    Controller(String),

    #[error("config line {line}, key `{key}`: {reason}")]
    Config {
        line: usize,
        key: String,
        reason: String,
    },

    #[error("{file} row {row}: {reason}")]
    Schema {
        file: String,
        row: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }

    /// True for failures of the numerical pipeline, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Integration { .. }
                | Error::Eigen(_)
                | Error::Relaxation(_)
                | Error::Infeasible
                | Error::Controller(_)
        )
    }
}
