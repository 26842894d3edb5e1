use std::io;

/// Errors raised across the recognition pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Inputs violate a documented precondition (shapes, dimensions, binary images).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("no glyph template for character {0:?}")]
    MissingGlyph(char),
    #[error("configuration error: {0}")]
    Config(String),
    /// The label sequence needs more frames than the input provides.
    #[error("infeasible alignment: {labels} labels with {repeats} adjacent repeats need at least {needed} frames, got {frames}")]
    InfeasibleAlignment {
        labels: usize,
        repeats: usize,
        needed: usize,
        frames: usize,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
