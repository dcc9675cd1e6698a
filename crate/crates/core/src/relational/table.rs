//! Row relations stored in the buffer pool as fixed-size row batches.

use std::collections::HashSet;
use std::sync::Arc;

use super::blocks::RelationHandle;
use super::buffer_pool::{BufferPool, Page, PageKey};
use super::value::{KeyValue, RowRelation, Schema};
use crate::error::{Error, Result};

/// Rows per buffer-pool page for row relations.
pub const BATCH_ROWS: usize = 4096;

#[derive(Clone)]
pub struct StoredTable {
    handle: Arc<RelationHandle>,
    schema: Schema,
    keys: Vec<usize>,
    row_count: usize,
    batches: usize,
}

impl std::fmt::Debug for StoredTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StoredTable")
            .field("relation", &self.handle.id)
            .field("rows", &self.row_count)
            .field("batches", &self.batches)
            .finish()
    }
}

impl StoredTable {
    pub fn store(pool: &Arc<BufferPool>, rel: &RowRelation) -> Result<Self> {
        let mut w = TableWriter::new(pool, rel.schema().clone(), rel.keys().to_vec());
        let mut start = 0;
        while start < rel.len() {
            let end = (start + BATCH_ROWS).min(rel.len());
            w.push_batch(rel.slice(start, end))?;
            start = end;
        }
        w.finish()
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn keys(&self) -> &[usize] {
        &self.keys
    }

    pub fn row_count(&self) -> usize {
        self.row_count
    }

    pub fn num_batches(&self) -> usize {
        self.batches
    }

    pub fn batch(&self, i: usize) -> Result<Arc<RowRelation>> {
        self.handle
            .pool
            .get(PageKey::new(self.handle.id, i as u64, 0))?
            .into_rows()
    }

    /// Reads every batch back into one relation.
    pub fn scan(&self) -> Result<RowRelation> {
        let mut out = RowRelation::empty(self.schema.clone());
        for i in 0..self.batches {
            out.append(self.batch(i)?.as_ref())?;
        }
        out.with_keys(self.keys.clone())
    }
}

/// Streams row batches into the pool.
pub struct TableWriter {
    handle: Arc<RelationHandle>,
    schema: Schema,
    keys: Vec<usize>,
    seen_keys: HashSet<Vec<KeyValue>>,
    row_count: usize,
    batches: usize,
}

impl TableWriter {
    pub fn new(pool: &Arc<BufferPool>, schema: Schema, keys: Vec<usize>) -> Self {
        TableWriter {
            handle: RelationHandle::new(pool),
            schema,
            keys,
            seen_keys: HashSet::new(),
            row_count: 0,
            batches: 0,
        }
    }

    pub fn rows_written(&self) -> usize {
        self.row_count
    }

    pub fn push_batch(&mut self, batch: RowRelation) -> Result<()> {
        if batch.schema() != &self.schema {
            return Err(Error::invalid("batch schema differs from table schema"));
        }
        if batch.is_empty() {
            return Ok(());
        }
        if batch.len() > BATCH_ROWS {
            return Err(Error::invalid(format!("batch of {} rows exceeds {BATCH_ROWS}", batch.len())));
        }
        if !self.keys.is_empty() {
            for i in 0..batch.len() {
                let key: Vec<KeyValue> = self.keys.iter().map(|&k| batch.column(k).key(i)).collect();
                if !self.seen_keys.insert(key) {
                    return Err(Error::Ingest {
                        row: self.row_count + i + 1,
                        message: "duplicate key".into(),
                    });
                }
            }
        }
        let batch = batch.with_keys(Vec::new())?;
        let key = PageKey::new(self.handle.id, self.batches as u64, 0);
        self.handle.pool.put(key, Page::Rows(Arc::new(batch.clone())))?;
        self.row_count += batch.len();
        self.batches += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<StoredTable> {
        Ok(StoredTable {
            handle: self.handle,
            schema: self.schema,
            keys: self.keys,
            row_count: self.row_count,
            batches: self.batches,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relational::{DataType, Field, Value};

    #[test]
    fn large_table_spills_and_scans_back() {
        let schema = Schema::new(vec![Field::new("id", DataType::Int), Field::new("x", DataType::Float)]);
        let rows = (0..10_000).map(|i| vec![Value::Int(i), Value::Float(i as f64)]).collect();
        let rel = RowRelation::from_rows(schema, rows).unwrap().with_keys(vec![0]).unwrap();
        let pool = Arc::new(BufferPool::temporary(BATCH_ROWS as u64 * 16 + 1).unwrap());
        let t = StoredTable::store(&pool, &rel).unwrap();
        assert_eq!(t.num_batches(), 3);
        assert!(pool.stats().spills >= 2);
        assert_eq!(t.scan().unwrap(), rel);
    }
}
