//! An in-process analytical engine that serves feed-forward and
//! convolutional networks inside SQL-style inference queries.
//!
//! Each linear-algebra operator runs either as a dense in-memory kernel
//! (UDF-centric) or as relational operators over blocked matrices
//! (relation-centric), chosen per operator by a memory threshold. Blocked
//! matrices live in a byte-budgeted buffer pool that spills to disk.

pub mod bench;
pub mod cache;
pub mod catalog;
pub mod engine;
pub mod error;
pub mod ir;
pub mod linalg;
pub mod model;
pub mod relational;
pub mod sql;
pub mod tensor;

pub use engine::{Engine, EngineConfig, QueryReport, QueryResult};
pub use error::{Error, Phase, QueryError, Result};
