//! Query language: parser, canonical rendering, binding and CSV ingestion.

pub mod ast;
pub mod bind;
pub mod ingest;
pub mod parser;

pub use ast::{CmpOp, Comparison, Literal, Name, Operand, Query, SelectList};
pub use bind::{bind, BoundQuery, BoundTable, Output};
pub use ingest::{ingest_csv, IngestOptions};
pub use parser::{is_keyword, parse_query};
