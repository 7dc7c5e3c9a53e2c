use thiserror::Error;

/// Errors raised by the inference, selection and design routines.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("cell probability p[{group}][{cell}] = {value:e} is at or below the floor")]
    SingularCell {
        group: usize,
        cell: usize,
        value: f64,
    },

    #[error("matrix is numerically singular (condition number {condition:e})")]
    SingularMatrix { condition: f64 },

    #[error("expected count in group {group}, cell {cell} is zero")]
    ZeroExpectedCount { group: usize, cell: usize },

    #[error("every candidate fit failed")]
    AllFitsFailed,

    #[error("solver did not converge: {0}")]
    NoConvergence(String),
}

pub type Result<T> = std::result::Result<T, Error>;
