use thiserror::Error;

/// Errors raised across the estimation pipeline.
///
/// Each variant names the stage that failed so that callers (the CLI in
/// particular) can report where a fit broke down.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("variable `{variable}`: category {category} has zero observed frequency")]
    EmptyCategory { variable: String, category: i64 },

    #[error("pair ({first}, {second}): {message}")]
    Pairwise {
        first: String,
        second: String,
        message: String,
    },

    #[error("optimizer did not converge after {iterations} iterations (trace: {trace})")]
    NonConvergence { iterations: usize, trace: String },

    #[error("singular transform for `{variable}`: {message}")]
    SingularTransform { variable: String, message: String },

    #[error("identification error in equation for `{equation}`: {message}")]
    Identification { equation: String, message: String },

    #[error("model specification error: {0}")]
    Specification(String),

    #[error("instrument condition violated in equation for `{equation}`: {message}")]
    Instrument { equation: String, message: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Innermost error with stage labels stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
