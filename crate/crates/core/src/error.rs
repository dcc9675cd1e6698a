use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupt relation: {0}")]
    CorruptRelation(String),

    #[error("capacity exhausted: {0}")]
    Capacity(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("load error at {}: {message}", fmt_layer(*.layer, .field))]
    Load {
        layer: Option<usize>,
        field: String,
        message: String,
    },

    #[error("syntax error at line {line}, column {column} (token {token}): {message}")]
    Syntax {
        line: usize,
        column: usize,
        token: usize,
        message: String,
    },

    #[error("bind error: {0}")]
    Bind(String),

    #[error("ingest error at row {row}: {message}")]
    Ingest { row: usize, message: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("udf failed on row {row}: {source}")]
    Udf {
        row: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn fmt_layer(layer: Option<usize>, field: &str) -> String {
    match layer {
        Some(l) => format!("layer {l}, field `{field}`"),
        None => format!("field `{field}`"),
    }
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn load(layer: Option<usize>, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Load {
            layer,
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Query processing phase an error surfaced in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Parse,
    Bind,
    Plan,
    Execute,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Parse => "parse",
            Phase::Bind => "bind",
            Phase::Plan => "plan",
            Phase::Execute => "execute",
        })
    }
}

/// An error labelled with the phase that produced it.
#[derive(Debug, Error)]
#[error("{phase}: {source}")]
pub struct QueryError {
    pub phase: Phase,
    #[source]
    pub source: Error,
}

impl QueryError {
    pub fn new(phase: Phase, source: Error) -> Self {
        QueryError { phase, source }
    }
}
