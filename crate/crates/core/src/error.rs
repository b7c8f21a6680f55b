use std::io;

use thiserror::Error;

/// Errors raised anywhere in the registration stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("non-finite parameter `{name}` after step {step}")]
    NonFiniteParam { name: String, step: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable code, used by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "E_SHAPE",
            Error::Axis { .. } => "E_AXIS",
            Error::Config(_) => "E_CONFIG",
            Error::Graph(_) => "E_GRAPH",
            Error::NonFinite { .. } | Error::NonFiniteParam { .. } => "E_NONFINITE",
            Error::Format(_) => "E_FORMAT",
            Error::Metric(_) => "E_METRIC",
            Error::Generation(_) => "E_GENERATION",
            Error::Io(_) => "E_IO",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use shape_err;
