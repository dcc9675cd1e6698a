//! Row and block relations, the relational operators over them, and the
//! buffer pool they are paged through.

pub mod blocks;
pub mod buffer_pool;
pub mod context;
pub mod memory;
pub mod ops;
pub mod table;
pub mod value;

pub use blocks::{BlockRelation, BlockTuple};
pub use buffer_pool::{BufferPool, Page, PageKey, PoolStats};
pub use context::ExecContext;
pub use memory::{MemoryGovernor, Reservation};
pub use ops::{
    count_by, equi_join, filter, filter_rows, group_aggregate, group_aggregate_with, join_output,
    join_pairs, join_rows, map_rows, map_udf,
};
pub use table::{StoredTable, TableWriter, BATCH_ROWS};
pub use value::{Column, DataType, Field, KeyValue, OrderedBits, RowRef, RowRelation, Schema, Value};
