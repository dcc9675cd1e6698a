//! Matrices as complete grids of tensor blocks.

use std::collections::BTreeMap;

use super::DenseTensor;
use crate::error::{Error, Result};

/// One tile of a blocked matrix. Edge tiles may be smaller than the grid
/// block size but are never empty.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlock {
    pub block_row_id: usize,
    pub block_col_id: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TensorBlock {
    pub fn new(
        block_row_id: usize,
        block_col_id: usize,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "block ({block_row_id},{block_col_id}) is {rows}x{cols} with {} values",
                data.len()
            )));
        }
        Ok(TensorBlock {
            block_row_id,
            block_col_id,
            rows,
            cols,
            data,
        })
    }

    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor::matrix(self.rows, self.cols, self.data.clone()).expect("block invariant")
    }
}

/// Number of grid cells needed to cover `len` with cells of `size`.
pub fn grid_extent(len: usize, size: usize) -> usize {
    len.div_ceil(size)
}

/// Dimension of grid cell `idx` along an axis of length `len`.
pub fn cell_extent(len: usize, size: usize, idx: usize) -> usize {
    size.min(len - idx * size)
}

/// A matrix stored as a relation of `(block_row_id, block_col_id, data)`
/// tuples. The grid is always complete; all-zero blocks are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedMatrix {
    pub logical_rows: usize,
    pub logical_cols: usize,
    pub block_rows: usize,
    pub block_cols: usize,
    blocks: BTreeMap<(usize, usize), TensorBlock>,
}

impl BlockedMatrix {
    /// Assembles a blocked matrix from an arbitrary collection of blocks,
    /// validating that they tile the grid exactly.
    pub fn from_blocks(
        logical_rows: usize,
        logical_cols: usize,
        block_rows: usize,
        block_cols: usize,
        blocks: impl IntoIterator<Item = TensorBlock>,
    ) -> Result<Self> {
        if block_rows == 0 || block_cols == 0 {
            return Err(Error::invalid("block size must be positive"));
        }
        let grid_r = grid_extent(logical_rows, block_rows);
        let grid_c = grid_extent(logical_cols, block_cols);
        let mut map = BTreeMap::new();
        for b in blocks {
            let key = (b.block_row_id, b.block_col_id);
            if b.block_row_id >= grid_r || b.block_col_id >= grid_c {
                return Err(Error::CorruptRelation(format!(
                    "block {key:?} outside {grid_r}x{grid_c} grid"
                )));
            }
            let want_r = cell_extent(logical_rows, block_rows, b.block_row_id);
            let want_c = cell_extent(logical_cols, block_cols, b.block_col_id);
            if b.rows != want_r || b.cols != want_c || b.data.len() != want_r * want_c {
                return Err(Error::CorruptRelation(format!(
                    "block {key:?} is {}x{}, expected {want_r}x{want_c}",
                    b.rows, b.cols
                )));
            }
            if map.insert(key, b).is_some() {
                return Err(Error::CorruptRelation(format!("duplicate block {key:?}")));
            }
        }
        if map.len() != grid_r * grid_c {
            return Err(Error::CorruptRelation(format!(
                "grid has {} of {} blocks",
                map.len(),
                grid_r * grid_c
            )));
        }
        Ok(BlockedMatrix {
            logical_rows,
            logical_cols,
            block_rows,
            block_cols,
            blocks: map,
        })
    }

    pub fn grid_rows(&self) -> usize {
        grid_extent(self.logical_rows, self.block_rows)
    }

    pub fn grid_cols(&self) -> usize {
        grid_extent(self.logical_cols, self.block_cols)
    }

    pub fn block(&self, block_row_id: usize, block_col_id: usize) -> Option<&TensorBlock> {
        self.blocks.get(&(block_row_id, block_col_id))
    }

    /// Blocks in grid order (row-major over block ids).
    pub fn blocks(&self) -> impl Iterator<Item = &TensorBlock> {
        self.blocks.values()
    }

    pub fn into_blocks(self) -> impl Iterator<Item = TensorBlock> {
        self.blocks.into_values()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }
}

/// Tiles a rank-2 tensor into a complete grid of `block_rows x block_cols`
/// blocks with ragged edges.
pub fn block_partition(t: &DenseTensor, block_rows: usize, block_cols: usize) -> Result<BlockedMatrix> {
    let (rows, cols) = t.expect_rank2("block_partition")?;
    if block_rows == 0 || block_cols == 0 {
        return Err(Error::invalid("block size must be positive"));
    }
    let mut blocks = Vec::new();
    for bi in 0..grid_extent(rows, block_rows) {
        for bj in 0..grid_extent(cols, block_cols) {
            blocks.push(extract_block(t.data(), cols, block_rows, block_cols, rows, bi, bj));
        }
    }
    BlockedMatrix::from_blocks(rows, cols, block_rows, block_cols, blocks)
}

/// Copies grid cell `(bi, bj)` out of a row-major `rows x cols` buffer.
pub(crate) fn extract_block(
    data: &[f64],
    cols: usize,
    block_rows: usize,
    block_cols: usize,
    rows: usize,
    bi: usize,
    bj: usize,
) -> TensorBlock {
    let r = cell_extent(rows, block_rows, bi);
    let c = cell_extent(cols, block_cols, bj);
    let mut out = Vec::with_capacity(r * c);
    for y in 0..r {
        let start = (bi * block_rows + y) * cols + bj * block_cols;
        out.extend_from_slice(&data[start..start + c]);
    }
    TensorBlock {
        block_row_id: bi,
        block_col_id: bj,
        rows: r,
        cols: c,
        data: out,
    }
}

/// Inverse of [`block_partition`].
pub fn reassemble(m: &BlockedMatrix) -> Result<DenseTensor> {
    let (rows, cols) = (m.logical_rows, m.logical_cols);
    if m.blocks.len() != m.grid_rows() * m.grid_cols() {
        return Err(Error::CorruptRelation("incomplete block grid".into()));
    }
    let mut data = vec![0.0; rows * cols];
    for b in m.blocks() {
        write_block(&mut data, cols, m.block_rows, m.block_cols, b);
    }
    DenseTensor::matrix(rows, cols, data)
}

pub(crate) fn write_block(
    dst: &mut [f64],
    cols: usize,
    block_rows: usize,
    block_cols: usize,
    b: &TensorBlock,
) {
    for y in 0..b.rows {
        let start = (b.block_row_id * block_rows + y) * cols + b.block_col_id * block_cols;
        dst[start..start + b.cols].copy_from_slice(&b.data[y * b.cols..(y + 1) * b.cols]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(rows: usize, cols: usize) -> DenseTensor {
        DenseTensor::matrix(rows, cols, (0..rows * cols).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn four_by_four_in_two_by_two() {
        let t = seq(4, 4);
        let m = block_partition(&t, 2, 2).unwrap();
        assert_eq!(m.num_blocks(), 4);
        assert!(m.blocks().all(|b| b.rows == 2 && b.cols == 2));
        assert_eq!(m.block(0, 0).unwrap().data[0], 0.0);
        assert_eq!(*m.block(1, 1).unwrap().data.last().unwrap(), 15.0);
        assert_eq!(m.block(0, 1).unwrap().data[1], 3.0);
        assert_eq!(m.block(1, 0).unwrap().data[2], 12.0);
    }

    #[test]
    fn ragged_five_by_three() {
        let t = seq(5, 3);
        let m = block_partition(&t, 2, 2).unwrap();
        assert_eq!((m.grid_rows(), m.grid_cols()), (3, 2));
        // scalar-loop oracle: every element lands at its block-local offset
        for r in 0..5 {
            for c in 0..3 {
                let b = m.block(r / 2, c / 2).unwrap();
                assert_eq!(b.data[(r % 2) * b.cols + c % 2], t.get2(r, c));
            }
        }
        for bj in 0..2 {
            assert_eq!(m.block(2, bj).unwrap().rows, 1);
        }
        for bi in 0..3 {
            assert_eq!(m.block(bi, 1).unwrap().cols, 1);
        }
        assert_eq!(reassemble(&m).unwrap(), t);
    }

    #[test]
    fn large_fc_grid_arithmetic() {
        assert_eq!(grid_extent(1024, 1000), 2);
        assert_eq!(grid_extent(597_540, 1000), 598);
        assert_eq!(cell_extent(597_540, 1000, 597), 540);
        assert_eq!(cell_extent(1024, 1000, 1), 24);
    }

    #[test]
    fn unit_matrix() {
        let t = DenseTensor::matrix(1, 1, vec![3.5]).unwrap();
        let m = block_partition(&t, 1, 1).unwrap();
        assert_eq!(reassemble(&m).unwrap(), t);
    }

    #[test]
    fn zero_block_size_rejected() {
        let t = seq(2, 2);
        assert!(matches!(block_partition(&t, 0, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(block_partition(&t, 1, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn missing_and_duplicate_blocks_are_corrupt() {
        let m = block_partition(&seq(4, 4), 2, 2).unwrap();
        let mut blocks: Vec<_> = m.clone().into_blocks().collect();
        let dup = blocks[0].clone();
        blocks.pop();
        assert!(matches!(
            BlockedMatrix::from_blocks(4, 4, 2, 2, blocks.clone()),
            Err(Error::CorruptRelation(_))
        ));
        blocks.push(dup);
        assert!(matches!(
            BlockedMatrix::from_blocks(4, 4, 2, 2, blocks),
            Err(Error::CorruptRelation(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn partition_round_trip_is_bitwise(
            rows in 1usize..40, cols in 1usize..40,
            br in 1usize..12, bc in 1usize..12, seed in any::<u64>()
        ) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| f64::from_bits((seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)) >> 2))
                .collect();
            let t = DenseTensor::matrix(rows, cols, data).unwrap();
            let m = block_partition(&t, br, bc).unwrap();
            prop_assert_eq!(m.num_blocks(), rows.div_ceil(br) * cols.div_ceil(bc));
            let back = reassemble(&m).unwrap();
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
