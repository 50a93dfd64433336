use thiserror::Error;

use crate::sim::IterationTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("operation requires an affine-quadratic control structure: {0}")]
    Structure(String),

    /// Training blew up. Carries whatever outer-loop trace existed at the time.
    #[error("training diverged at step {step} (loss {loss:e})")]
    TrainingDiverged {
        step: usize,
        loss: f64,
        trace: Box<IterationTrace>,
    },

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("no oracle available for problem `{0}`")]
    UnsupportedComparison(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerical(_) | Error::TrainingDiverged { .. } | Error::Assumption(_) => 3,
            Error::Oracle(_) | Error::UnsupportedComparison(_) => 4,
            Error::Structure(_) => 5,
            Error::Format(_) | Error::Io(_) => 6,
        }
    }
}
