//! Pool-resident tensor relations.

use std::sync::Arc;

use super::buffer_pool::{BufferPool, Page, PageKey};
use crate::error::{Error, Result};
use crate::tensor::block::{cell_extent, extract_block, grid_extent, write_block};
use crate::tensor::{BlockedMatrix, DenseTensor, TensorBlock};

/// Owns a relation id; dropping the last handle frees its pages.
pub(crate) struct RelationHandle {
    pub(crate) id: u64,
    pub(crate) pool: Arc<BufferPool>,
}

impl RelationHandle {
    pub(crate) fn new(pool: &Arc<BufferPool>) -> Arc<Self> {
        Arc::new(RelationHandle {
            id: pool.next_relation_id(),
            pool: Arc::clone(pool),
        })
    }
}

impl Drop for RelationHandle {
    fn drop(&mut self) {
        self.pool.drop_relation(self.id);
    }
}

/// Metadata of one `(block_row_id, block_col_id, block)` tuple; the payload
/// lives in the buffer pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockTuple {
    pub block_row_id: usize,
    pub block_col_id: usize,
    pub rows: usize,
    pub cols: usize,
}

/// A matrix stored as a relation of tensor blocks in the buffer pool. The
/// payload of each tuple is paged in on demand, so the matrix may be far
/// larger than the pool budget.
#[derive(Clone)]
pub struct BlockRelation {
    handle: Arc<RelationHandle>,
    pub logical_rows: usize,
    pub logical_cols: usize,
    pub block_rows: usize,
    pub block_cols: usize,
}

impl std::fmt::Debug for BlockRelation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "BlockRelation#{}({}x{} in {}x{} blocks)",
            self.handle.id, self.logical_rows, self.logical_cols, self.block_rows, self.block_cols
        )
    }
}

impl BlockRelation {
    /// An empty relation; every grid cell must be filled with
    /// [`BlockRelation::put_block`] before it is read.
    pub fn create(
        pool: &Arc<BufferPool>,
        logical_rows: usize,
        logical_cols: usize,
        block_rows: usize,
        block_cols: usize,
    ) -> Result<Self> {
        if block_rows == 0 || block_cols == 0 {
            return Err(Error::invalid("block size must be positive"));
        }
        if logical_rows == 0 || logical_cols == 0 {
            return Err(Error::invalid("blocked matrix must be non-empty"));
        }
        Ok(BlockRelation {
            handle: RelationHandle::new(pool),
            logical_rows,
            logical_cols,
            block_rows,
            block_cols,
        })
    }

    pub fn from_dense(pool: &Arc<BufferPool>, t: &DenseTensor, block_rows: usize, block_cols: usize) -> Result<Self> {
        let (rows, cols) = t.expect_rank2("block partition")?;
        let rel = Self::create(pool, rows, cols, block_rows, block_cols)?;
        for bi in 0..rel.grid_rows() {
            for bj in 0..rel.grid_cols() {
                rel.put_block(extract_block(t.data(), cols, block_rows, block_cols, rows, bi, bj))?;
            }
        }
        Ok(rel)
    }

    pub fn from_blocked(pool: &Arc<BufferPool>, m: &BlockedMatrix) -> Result<Self> {
        let rel = Self::create(pool, m.logical_rows, m.logical_cols, m.block_rows, m.block_cols)?;
        for b in m.blocks() {
            rel.put_block(b.clone())?;
        }
        Ok(rel)
    }

    /// Generates every block with `f(block_row_id, block_col_id, rows, cols)`.
    pub fn from_fn(
        pool: &Arc<BufferPool>,
        logical_rows: usize,
        logical_cols: usize,
        block_rows: usize,
        block_cols: usize,
        f: impl Fn(usize, usize, usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let rel = Self::create(pool, logical_rows, logical_cols, block_rows, block_cols)?;
        for t in rel.tuples() {
            let data = f(t.block_row_id, t.block_col_id, t.rows, t.cols);
            rel.put_block(TensorBlock::new(t.block_row_id, t.block_col_id, t.rows, t.cols, data)?)?;
        }
        Ok(rel)
    }

    pub fn id(&self) -> u64 {
        self.handle.id
    }

    pub fn pool(&self) -> &Arc<BufferPool> {
        &self.handle.pool
    }

    pub fn grid_rows(&self) -> usize {
        grid_extent(self.logical_rows, self.block_rows)
    }

    pub fn grid_cols(&self) -> usize {
        grid_extent(self.logical_cols, self.block_cols)
    }

    pub fn size_bytes(&self) -> u64 {
        (self.logical_rows * self.logical_cols) as u64 * 8
    }

    pub fn same_grid(&self, other: &BlockRelation) -> bool {
        (self.logical_rows, self.logical_cols, self.block_rows, self.block_cols)
            == (other.logical_rows, other.logical_cols, other.block_rows, other.block_cols)
    }

    pub fn tuple(&self, block_row_id: usize, block_col_id: usize) -> BlockTuple {
        BlockTuple {
            block_row_id,
            block_col_id,
            rows: cell_extent(self.logical_rows, self.block_rows, block_row_id),
            cols: cell_extent(self.logical_cols, self.block_cols, block_col_id),
        }
    }

    /// All tuples in grid order.
    pub fn tuples(&self) -> Vec<BlockTuple> {
        let mut out = Vec::with_capacity(self.grid_rows() * self.grid_cols());
        for bi in 0..self.grid_rows() {
            for bj in 0..self.grid_cols() {
                out.push(self.tuple(bi, bj));
            }
        }
        out
    }

    pub fn key(&self, block_row_id: usize, block_col_id: usize) -> PageKey {
        PageKey::new(self.handle.id, block_row_id as u64, block_col_id as u64)
    }

    pub fn put_block(&self, block: TensorBlock) -> Result<()> {
        let (bi, bj) = (block.block_row_id, block.block_col_id);
        if bi >= self.grid_rows() || bj >= self.grid_cols() {
            return Err(Error::CorruptRelation(format!("block ({bi},{bj}) outside grid")));
        }
        let want = self.tuple(bi, bj);
        if (block.rows, block.cols) != (want.rows, want.cols) {
            return Err(Error::CorruptRelation(format!(
                "block ({bi},{bj}) is {}x{}, grid expects {}x{}",
                block.rows, block.cols, want.rows, want.cols
            )));
        }
        self.pool().put(self.key(bi, bj), Page::Block(Arc::new(block)))
    }

    pub fn block(&self, block_row_id: usize, block_col_id: usize) -> Result<Arc<TensorBlock>> {
        match self.pool().get(self.key(block_row_id, block_col_id)) {
            Ok(page) => page.into_block(),
            Err(Error::NotFound(_)) => Err(Error::CorruptRelation(format!(
                "missing block ({block_row_id},{block_col_id}) in relation {}",
                self.id()
            ))),
            Err(e) => Err(e),
        }
    }

    pub fn to_blocked(&self) -> Result<BlockedMatrix> {
        let blocks = self
            .tuples()
            .into_iter()
            .map(|t| self.block(t.block_row_id, t.block_col_id).map(|b| (*b).clone()))
            .collect::<Result<Vec<_>>>()?;
        BlockedMatrix::from_blocks(
            self.logical_rows,
            self.logical_cols,
            self.block_rows,
            self.block_cols,
            blocks,
        )
    }

    /// Reassembles the full matrix in memory.
    pub fn to_dense(&self) -> Result<DenseTensor> {
        let cols = self.logical_cols;
        let mut data = vec![0.0; self.logical_rows * cols];
        for t in self.tuples() {
            let b = self.block(t.block_row_id, t.block_col_id)?;
            write_block(&mut data, cols, self.block_rows, self.block_cols, &b);
        }
        DenseTensor::matrix(self.logical_rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::block_partition;

    #[test]
    fn dense_round_trip_under_tight_pool() {
        let pool = Arc::new(BufferPool::temporary(3 * 4 * 8).unwrap());
        let t = DenseTensor::matrix(7, 5, (0..35).map(|v| v as f64 * 0.5).collect()).unwrap();
        let rel = BlockRelation::from_dense(&pool, &t, 2, 2).unwrap();
        assert!(pool.stats().spills > 0);
        assert_eq!(rel.to_dense().unwrap(), t);
        assert_eq!(rel.to_blocked().unwrap(), block_partition(&t, 2, 2).unwrap());
    }

    #[test]
    fn dropping_relation_frees_pages() {
        let pool = Arc::new(BufferPool::temporary(1 << 20).unwrap());
        let t = DenseTensor::matrix(4, 4, vec![1.0; 16]).unwrap();
        let rel = BlockRelation::from_dense(&pool, &t, 2, 2).unwrap();
        assert_eq!(pool.resident_bytes(), 128);
        drop(rel);
        assert_eq!(pool.resident_bytes(), 0);
    }

    #[test]
    fn missing_block_is_corrupt() {
        let pool = Arc::new(BufferPool::temporary(1 << 20).unwrap());
        let rel = BlockRelation::create(&pool, 2, 2, 1, 1).unwrap();
        assert!(matches!(rel.to_dense(), Err(Error::CorruptRelation(_))));
        let bad = TensorBlock::new(0, 0, 1, 2, vec![0.0; 2]).unwrap();
        assert!(matches!(rel.put_block(bad), Err(Error::CorruptRelation(_))));
    }
}
