//! Linear-algebra operators in both representations.
//!
//! The UDF-centric forms delegate to the dense kernels in [`crate::tensor`].
//! The relation-centric forms run over [`BlockRelation`]s: a product is an
//! equi-join of left and right blocks on the shared inner block id followed
//! by a grouped sum of the per-pair block products, a sum is a join on the
//! full block id, and an activation is a per-block map.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relational::{equi_join, group_aggregate_with, BlockRelation, BlockTuple, BufferPool, ExecContext};
use crate::tensor::block::{cell_extent, grid_extent};
use crate::tensor::conv::spatial_rewrite_shape;
use crate::tensor::kernels::matmul_into;
use crate::tensor::{
    apply_activation, conv_output_from_matmul, dense_matmul, kernel_flatten, spatial_rewrite,
    transpose, ActivationKind, DenseTensor, TensorBlock,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Representation {
    #[serde(rename = "UDF")]
    Udf,
    #[serde(rename = "RELATION")]
    Relation,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::Udf => "UDF",
            Representation::Relation => "RELATION",
        })
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "UDF" | "udf" => Ok(Representation::Udf),
            "RELATION" | "relation" => Ok(Representation::Relation),
            other => Err(Error::invalid(format!("unknown representation `{other}`"))),
        }
    }
}

/// One row of the matmul join: block `(out_row, inner)` of the left operand
/// paired with block `(inner, out_col)` of the right operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPair {
    pub out_row: usize,
    pub out_col: usize,
    pub inner: usize,
}

fn check_matmul_partitioning(a: &BlockRelation, b: &BlockRelation) -> Result<()> {
    if a.logical_cols != b.logical_rows {
        return Err(Error::invalid(format!(
            "matmul shape mismatch: {}x{} times {}x{}",
            a.logical_rows, a.logical_cols, b.logical_rows, b.logical_cols
        )));
    }
    if a.block_cols != b.block_rows {
        return Err(Error::invalid(format!(
            "inner partitioning mismatch: left block cols {} vs right block rows {}",
            a.block_cols, b.block_rows
        )));
    }
    Ok(())
}

/// Join half of the blocked product: `a.block_col_id = b.block_row_id`.
pub fn matmul_join(a: &BlockRelation, b: &BlockRelation) -> Result<Vec<BlockPair>> {
    check_matmul_partitioning(a, b)?;
    equi_join(
        &a.tuples(),
        &b.tuples(),
        |l: &BlockTuple| l.block_col_id,
        |r: &BlockTuple| r.block_row_id,
        |l, r| {
            Ok(BlockPair {
                out_row: l.block_row_id,
                out_col: r.block_col_id,
                inner: l.block_col_id,
            })
        },
    )
}

/// Aggregate half of the blocked product. Each pair's block product is
/// computed when the pair is folded, so partial products never need to be
/// materialized all at once; per output block they are summed in ascending
/// inner block order.
pub fn matmul_aggregate(
    ctx: &ExecContext,
    a: &BlockRelation,
    b: &BlockRelation,
    pairs: &[BlockPair],
) -> Result<BlockRelation> {
    check_matmul_partitioning(a, b)?;
    let out = BlockRelation::create(ctx.pool(), a.logical_rows, b.logical_cols, a.block_rows, b.block_cols)?;
    ctx.install(|| {
        group_aggregate_with(
            pairs,
            |p| (p.out_row, p.out_col),
            |p| p.inner,
            None::<Vec<f64>>,
            |acc, p| {
                let lhs = a.block(p.out_row, p.inner)?;
                let rhs = b.block(p.inner, p.out_col)?;
                let mut prod = vec![0.0; lhs.rows * rhs.cols];
                matmul_into(&lhs.data, &rhs.data, &mut prod, lhs.cols, rhs.cols);
                Ok(Some(match acc {
                    None => prod,
                    Some(mut sum) => {
                        sum.iter_mut().zip(&prod).for_each(|(s, x)| *s += x);
                        sum
                    }
                }))
            },
            |&(i, j), acc| {
                let t = out.tuple(i, j);
                let data = acc.expect("every group has at least one pair");
                out.put_block(TensorBlock::new(i, j, t.rows, t.cols, data)?)
            },
        )
    })?;
    Ok(out)
}

/// Blocked matrix product as a join followed by a grouped sum.
pub fn matmul_as_join_agg(ctx: &ExecContext, a: &BlockRelation, b: &BlockRelation) -> Result<BlockRelation> {
    let pairs = matmul_join(a, b)?;
    matmul_aggregate(ctx, a, b, &pairs)
}

/// The same product executed as one dense UDF: both operands are
/// materialized in memory, subject to the context's dense allocation cap.
pub fn matmul_as_udf(ctx: &ExecContext, a: &BlockRelation, b: &BlockRelation) -> Result<DenseTensor> {
    check_matmul_partitioning(a, b)?;
    let bytes = a.size_bytes() + b.size_bytes() + (a.logical_rows * b.logical_cols) as u64 * 8;
    let _guard = ctx.memory().reserve(bytes, "dense matmul")?;
    let (x, y) = (a.to_dense()?, b.to_dense()?);
    ctx.install(|| dense_matmul(&x, &y))
}

/// Elementwise sum as a join on `(block_row_id, block_col_id)`.
pub fn add_as_join(ctx: &ExecContext, a: &BlockRelation, b: &BlockRelation) -> Result<BlockRelation> {
    if !a.same_grid(b) {
        return Err(Error::invalid(format!("grid mismatch: {a:?} vs {b:?}")));
    }
    let out = BlockRelation::create(ctx.pool(), a.logical_rows, a.logical_cols, a.block_rows, a.block_cols)?;
    let cells = equi_join(
        &a.tuples(),
        &b.tuples(),
        |t: &BlockTuple| (t.block_row_id, t.block_col_id),
        |t: &BlockTuple| (t.block_row_id, t.block_col_id),
        |l, _| Ok(*l),
    )?;
    ctx.install(|| {
        cells.par_iter().try_for_each(|t| {
            let (x, y) = (a.block(t.block_row_id, t.block_col_id)?, b.block(t.block_row_id, t.block_col_id)?);
            let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
            out.put_block(TensorBlock::new(t.block_row_id, t.block_col_id, t.rows, t.cols, data)?)
        })
    })?;
    Ok(out)
}

/// Repeats a row vector down every row of a grid shaped like `like`, so a
/// bias can be added with [`add_as_join`].
pub fn tile_row_vector(pool: &Arc<BufferPool>, row: &DenseTensor, like: &BlockRelation) -> Result<BlockRelation> {
    if row.len() != like.logical_cols {
        return Err(Error::invalid(format!(
            "row vector of {} entries for a {}-column matrix",
            row.len(),
            like.logical_cols
        )));
    }
    let bc = like.block_cols;
    BlockRelation::from_fn(pool, like.logical_rows, like.logical_cols, like.block_rows, bc, |_, bj, r, c| {
        let seg = &row.data()[bj * bc..bj * bc + c];
        let mut data = Vec::with_capacity(r * c);
        for _ in 0..r {
            data.extend_from_slice(seg);
        }
        data
    })
}

/// Per-block activation. Softmax needs each row inside a single block.
pub fn activation_as_map(ctx: &ExecContext, m: &BlockRelation, kind: ActivationKind) -> Result<BlockRelation> {
    if kind == ActivationKind::Softmax && m.block_cols != m.logical_cols {
        return Err(Error::InvalidPlan(format!(
            "softmax over rows split across {}-column blocks of a {}-column matrix needs a reblock",
            m.block_cols, m.logical_cols
        )));
    }
    let out = BlockRelation::create(ctx.pool(), m.logical_rows, m.logical_cols, m.block_rows, m.block_cols)?;
    let tuples = m.tuples();
    ctx.install(|| {
        tuples.par_iter().try_for_each(|t| {
            let b = m.block(t.block_row_id, t.block_col_id)?;
            let y = apply_activation(&b.to_tensor(), kind)?;
            out.put_block(TensorBlock::new(t.block_row_id, t.block_col_id, t.rows, t.cols, y.into_data())?)
        })
    })?;
    Ok(out)
}

/// Copies a blocked matrix onto a different block grid.
pub fn reblock(ctx: &ExecContext, m: &BlockRelation, block_rows: usize, block_cols: usize) -> Result<BlockRelation> {
    let out = BlockRelation::create(ctx.pool(), m.logical_rows, m.logical_cols, block_rows, block_cols)?;
    if (block_rows, block_cols) == (m.block_rows, m.block_cols) {
        for t in m.tuples() {
            out.put_block((*m.block(t.block_row_id, t.block_col_id)?).clone())?;
        }
        return Ok(out);
    }
    let targets = out.tuples();
    ctx.install(|| {
        targets.par_iter().try_for_each(|t| {
            let (r0, c0) = (t.block_row_id * block_rows, t.block_col_id * block_cols);
            let mut data = vec![0.0; t.rows * t.cols];
            for si in r0 / m.block_rows..=(r0 + t.rows - 1) / m.block_rows {
                for sj in c0 / m.block_cols..=(c0 + t.cols - 1) / m.block_cols {
                    let src = m.block(si, sj)?;
                    let (sr0, sc0) = (si * m.block_rows, sj * m.block_cols);
                    let rows = r0.max(sr0)..(r0 + t.rows).min(sr0 + src.rows);
                    let cols = c0.max(sc0)..(c0 + t.cols).min(sc0 + src.cols);
                    for r in rows {
                        let s = (r - sr0) * src.cols + (cols.start - sc0);
                        let d = (r - r0) * t.cols + (cols.start - c0);
                        data[d..d + cols.len()].copy_from_slice(&src.data[s..s + cols.len()]);
                    }
                }
            }
            out.put_block(TensorBlock::new(t.block_row_id, t.block_col_id, t.rows, t.cols, data)?)
        })
    })?;
    Ok(out)
}

/// Block size pair `(rows, cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSize {
    pub rows: usize,
    pub cols: usize,
}

impl BlockSize {
    pub fn new(rows: usize, cols: usize) -> Self {
        BlockSize { rows, cols }
    }
}

/// Stride-1, unpadded 2-D convolution of a channel-last image through the
/// spatial rewrite `F x K^T`. In relation mode `F` is blocked with `block`
/// and `K^T` with `block.cols` rows per block, so the inner partitioning
/// matches.
pub fn conv2d_lowered(
    ctx: &ExecContext,
    image: &DenseTensor,
    kernels: &DenseTensor,
    bias: &DenseTensor,
    representation: Representation,
    block: BlockSize,
) -> Result<DenseTensor> {
    let [h, w, c] = *image.shape() else {
        return Err(Error::invalid(format!("image must be H x W x C, got {:?}", image.shape())));
    };
    let [out_c, kh, kw, kc] = *kernels.shape() else {
        return Err(Error::invalid(format!("kernels must be outC x kh x kw x C, got {:?}", kernels.shape())));
    };
    if kc != c {
        return Err(Error::invalid(format!("kernels expect {kc} channels, image has {c}")));
    }
    let (f_rows, f_cols) = spatial_rewrite_shape(h, w, c, kh, kw)?;
    let (out_h, out_w) = (h - kh + 1, w - kw + 1);
    let k_t = transpose(&kernel_flatten(kernels, bias)?)?;
    let product = match representation {
        Representation::Udf => {
            let bytes = ((f_rows * f_cols) + k_t.len() + f_rows * out_c) as u64 * 8;
            let _guard = ctx.memory().reserve(bytes, "dense conv2d")?;
            let f = spatial_rewrite(image, kh, kw)?;
            ctx.install(|| dense_matmul(&f, &k_t))?
        }
        Representation::Relation => {
            let f = spatial_rewrite(image, kh, kw)?;
            let fb = BlockRelation::from_dense(ctx.pool(), &f, block.rows, block.cols)?;
            drop(f);
            let kb = BlockRelation::from_dense(ctx.pool(), &k_t, block.cols, block.cols)?;
            matmul_as_join_agg(ctx, &fb, &kb)?.to_dense()?
        }
    };
    conv_output_from_matmul(product, out_h, out_w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingReduce {
    #[default]
    None,
    Sum,
}

/// Hash index from a key to the positions of the tuples carrying it.
#[derive(Debug, Clone)]
pub struct HashIndex<K> {
    map: HashMap<K, Vec<usize>>,
}

impl<K: Hash + Eq> HashIndex<K> {
    pub fn build<T>(rows: &[T], key: impl Fn(&T) -> K) -> Self {
        let mut map: HashMap<K, Vec<usize>> = HashMap::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            map.entry(key(r)).or_default().push(i);
        }
        HashIndex { map }
    }

    /// Positions satisfying `key = k`.
    pub fn select(&self, k: &K) -> &[usize] {
        self.map.get(k).map_or(&[], Vec::as_slice)
    }
}

/// An embedding table held as a relation of `(row_id, vector)` tuples over
/// a blocked matrix, with a hash index on `row_id`.
pub struct EmbeddingRelation {
    table: BlockRelation,
    rows: Vec<(i64, usize, usize)>,
    index: HashIndex<i64>,
}

impl EmbeddingRelation {
    pub fn new(table: BlockRelation) -> Self {
        let rows: Vec<(i64, usize, usize)> = (0..table.logical_rows)
            .map(|r| (r as i64, r / table.block_rows, r % table.block_rows))
            .collect();
        let index = HashIndex::build(&rows, |t| t.0);
        EmbeddingRelation { table, rows, index }
    }

    pub fn dim(&self) -> usize {
        self.table.logical_cols
    }

    pub fn len(&self) -> usize {
        self.table.logical_rows
    }

    pub fn is_empty(&self) -> bool {
        self.table.logical_rows == 0
    }

    /// `SELECT vector WHERE row_id = id`.
    pub fn select(&self, id: i64) -> Result<Vec<f64>> {
        let &pos = self
            .index
            .select(&id)
            .first()
            .ok_or_else(|| Error::invalid(format!("embedding id {id} out of range 0..{}", self.len())))?;
        let (_, bi, offset) = self.rows[pos];
        let mut out = Vec::with_capacity(self.dim());
        for bj in 0..grid_extent(self.table.logical_cols, self.table.block_cols) {
            let b = self.table.block(bi, bj)?;
            out.extend_from_slice(&b.data[offset * b.cols..(offset + 1) * b.cols]);
        }
        Ok(out)
    }
}

/// Source table for [`embedding_lookup`].
pub enum EmbeddingTable<'a> {
    Dense(&'a DenseTensor),
    Relation(&'a EmbeddingRelation),
}

/// Looks up `ids` in an `n x d` table. With `reduce = None` the result is
/// `ids.len() x d`; with `Sum` it is `1 x d`, summed in id order.
pub fn embedding_lookup(table: EmbeddingTable<'_>, ids: &[i64], reduce: EmbeddingReduce) -> Result<DenseTensor> {
    if ids.is_empty() {
        return Err(Error::invalid("embedding lookup needs at least one id"));
    }
    let (n, d) = match &table {
        EmbeddingTable::Dense(t) => t.expect_rank2("embedding table")?,
        EmbeddingTable::Relation(r) => (r.len(), r.dim()),
    };
    let fetch = |id: i64| -> Result<Vec<f64>> {
        match &table {
            EmbeddingTable::Dense(t) => {
                if id < 0 || id as usize >= n {
                    return Err(Error::invalid(format!("embedding id {id} out of range 0..{n}")));
                }
                Ok(t.row(id as usize).to_vec())
            }
            EmbeddingTable::Relation(r) => r.select(id),
        }
    };
    match reduce {
        EmbeddingReduce::None => {
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                data.extend(fetch(id)?);
            }
            DenseTensor::matrix(ids.len(), d, data)
        }
        EmbeddingReduce::Sum => {
            let mut acc = vec![0.0; d];
            for &id in ids {
                acc.iter_mut().zip(fetch(id)?).for_each(|(a, v)| *a += v);
            }
            DenseTensor::matrix(1, d, acc)
        }
    }
}

/// Extent helpers re-exported for planners choosing grids.
pub fn grid_dims(rows: usize, cols: usize, block: BlockSize) -> (usize, usize) {
    (grid_extent(rows, block.rows), grid_extent(cols, block.cols))
}

pub fn edge_extent(len: usize, size: usize, idx: usize) -> usize {
    cell_extent(len, size, idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{dense_add, reassemble};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> DenseTensor {
        let n = shape.iter().product();
        DenseTensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn ctx() -> ExecContext {
        ExecContext::unbounded().unwrap()
    }

    fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        got.iter().zip(want).fold(0.0f64, |m, (g, w)| m.max((g - w).abs())) / scale
    }

    #[test]
    fn identity_times_matrix() {
        let ctx = ctx();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, vec![5, 5]);
        let i = BlockRelation::from_dense(ctx.pool(), &DenseTensor::identity(5).unwrap(), 2, 2).unwrap();
        let ab = BlockRelation::from_dense(ctx.pool(), &a, 2, 3).unwrap();
        let got = matmul_as_join_agg(&ctx, &i, &ab).unwrap().to_dense().unwrap();
        assert_eq!(got, a);
    }

    #[test]
    fn ragged_product_matches_dense() {
        let ctx = ctx();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, vec![5, 4]);
        let b = random(&mut rng, vec![4, 3]);
        let ab = BlockRelation::from_dense(ctx.pool(), &a, 2, 2).unwrap();
        let bb = BlockRelation::from_dense(ctx.pool(), &b, 2, 2).unwrap();
        let pairs = matmul_join(&ab, &bb).unwrap();
        assert_eq!(pairs.len(), 3 * 2 * 2);
        let got = matmul_aggregate(&ctx, &ab, &bb, &pairs).unwrap();
        assert_eq!((got.grid_rows(), got.grid_cols()), (3, 2));
        let want = dense_matmul(&a, &b).unwrap();
        assert!(max_rel_err(got.to_dense().unwrap().data(), want.data()) <= 1e-12);
    }

    #[test]
    fn mismatched_inner_partitioning_rejected() {
        let ctx = ctx();
        let a = BlockRelation::from_dense(ctx.pool(), &DenseTensor::zeros(vec![4, 4]).unwrap(), 2, 2).unwrap();
        let b = BlockRelation::from_dense(ctx.pool(), &DenseTensor::zeros(vec![4, 4]).unwrap(), 3, 2).unwrap();
        assert!(matches!(matmul_as_join_agg(&ctx, &a, &b), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn result_independent_of_budget_and_workers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, vec![40, 30]);
        let b = random(&mut rng, vec![30, 20]);
        let run = |budget: u64, workers| {
            let ctx = ExecContext::new(Arc::new(BufferPool::temporary(budget).unwrap()), workers, None).unwrap();
            let ab = BlockRelation::from_dense(ctx.pool(), &a, 8, 8).unwrap();
            let bb = BlockRelation::from_dense(ctx.pool(), &b, 8, 8).unwrap();
            let out = matmul_as_join_agg(&ctx, &ab, &bb).unwrap().to_dense().unwrap();
            (out, ctx.pool().stats())
        };
        let (x, sx) = run(u64::MAX, 1);
        let (y, sy) = run(3 * 8 * 8 * 8, 4);
        assert_eq!(sx.spills, 0);
        assert!(sy.spills > 0);
        assert!(sy.peak_resident_bytes <= 3 * 8 * 8 * 8);
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn dense_udf_respects_cap() {
        let pool = Arc::new(BufferPool::temporary(u64::MAX).unwrap());
        let ctx = ExecContext::new(pool, 1, Some(1000)).unwrap();
        let t = DenseTensor::zeros(vec![10, 10]).unwrap();
        let a = BlockRelation::from_dense(ctx.pool(), &t, 5, 5).unwrap();
        assert!(matches!(matmul_as_udf(&ctx, &a, &a), Err(Error::Capacity(_))));
    }

    #[test]
    fn addition_as_join() {
        let ctx = ctx();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, vec![5, 7]);
        let b = random(&mut rng, vec![5, 7]);
        let ab = BlockRelation::from_dense(ctx.pool(), &a, 2, 3).unwrap();
        let bb = BlockRelation::from_dense(ctx.pool(), &b, 2, 3).unwrap();
        assert_eq!(add_as_join(&ctx, &ab, &bb).unwrap().to_dense().unwrap(), dense_add(&a, &b).unwrap());
        let zero = BlockRelation::from_dense(ctx.pool(), &DenseTensor::zeros(vec![5, 7]).unwrap(), 2, 3).unwrap();
        assert_eq!(add_as_join(&ctx, &ab, &zero).unwrap().to_dense().unwrap(), a);
        let other = BlockRelation::from_dense(ctx.pool(), &b, 3, 3).unwrap();
        assert!(add_as_join(&ctx, &ab, &other).is_err());

        let bias = random(&mut rng, vec![7]);
        let tiled = tile_row_vector(ctx.pool(), &bias, &ab).unwrap();
        let got = add_as_join(&ctx, &ab, &tiled).unwrap().to_dense().unwrap();
        assert_eq!(got, dense_add(&a, &bias).unwrap());
    }

    #[test]
    fn activations_per_block() {
        let ctx = ctx();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, vec![4, 6]);
        let ab = BlockRelation::from_dense(ctx.pool(), &a, 3, 4).unwrap();
        let relu = activation_as_map(&ctx, &ab, ActivationKind::Relu).unwrap().to_dense().unwrap();
        assert_eq!(relu, apply_activation(&a, ActivationKind::Relu).unwrap());
        let id = activation_as_map(&ctx, &ab, ActivationKind::Identity).unwrap().to_dense().unwrap();
        assert_eq!(id, a);
        assert!(matches!(
            activation_as_map(&ctx, &ab, ActivationKind::Softmax),
            Err(Error::InvalidPlan(_))
        ));
        let full_rows = reblock(&ctx, &ab, 2, 6).unwrap();
        let sm = activation_as_map(&ctx, &full_rows, ActivationKind::Softmax).unwrap().to_dense().unwrap();
        for row in sm.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        assert_eq!(sm, apply_activation(&a, ActivationKind::Softmax).unwrap());
    }

    #[test]
    fn reblock_preserves_values() {
        let ctx = ctx();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(&mut rng, vec![11, 9]);
        let ab = BlockRelation::from_dense(ctx.pool(), &a, 3, 4).unwrap();
        for (r, c) in [(1, 1), (2, 5), (11, 9), (4, 3), (3, 4)] {
            let rb = reblock(&ctx, &ab, r, c).unwrap();
            assert_eq!(reassemble(&rb.to_blocked().unwrap()).unwrap(), a);
        }
    }

    fn direct_conv(img: &DenseTensor, k: &DenseTensor, bias: &DenseTensor) -> Vec<f64> {
        let [h, w, c] = img.shape().try_into().unwrap();
        let [o, kh, kw, _] = k.shape().try_into().unwrap();
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut out = vec![0.0; oh * ow * o];
        for y in 0..oh {
            for x in 0..ow {
                for oc in 0..o {
                    let mut s = bias.data()[oc];
                    for dy in 0..kh {
                        for dx in 0..kw {
                            for ch in 0..c {
                                s += img.data()[((y + dy) * w + x + dx) * c + ch]
                                    * k.data()[((oc * kh + dy) * kw + dx) * c + ch];
                            }
                        }
                    }
                    out[(y * ow + x) * o + oc] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_both_representations() {
        let ctx = ctx();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random(&mut rng, vec![6, 6, 2]);
        let k = random(&mut rng, vec![4, 3, 3, 2]);
        let b = random(&mut rng, vec![4]);
        let want = direct_conv(&img, &k, &b);
        for repr in [Representation::Udf, Representation::Relation] {
            let got = conv2d_lowered(&ctx, &img, &k, &b, repr, BlockSize::new(5, 4)).unwrap();
            assert_eq!(got.shape(), &[4, 4, 4]);
            assert!(max_rel_err(got.data(), &want) <= 1e-12, "{repr}");
        }
        let one = DenseTensor::new(vec![1, 1, 1], vec![2.0]).unwrap();
        let w = DenseTensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let bias = DenseTensor::new(vec![1], vec![0.25]).unwrap();
        for repr in [Representation::Udf, Representation::Relation] {
            let got = conv2d_lowered(&ctx, &one, &w, &bias, repr, BlockSize::new(1, 1)).unwrap();
            assert_eq!(got.data(), &[6.25]);
        }
    }

    #[test]
    fn embedding_modes_agree() {
        let ctx = ctx();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let table = random(&mut rng, vec![50, 8]);
        let rel = EmbeddingRelation::new(BlockRelation::from_dense(ctx.pool(), &table, 7, 3).unwrap());
        let ids: Vec<i64> = (0..20).map(|_| rng.random_range(0..50)).collect();
        for reduce in [EmbeddingReduce::None, EmbeddingReduce::Sum] {
            let d = embedding_lookup(EmbeddingTable::Dense(&table), &ids, reduce).unwrap();
            let r = embedding_lookup(EmbeddingTable::Relation(&rel), &ids, reduce).unwrap();
            assert_eq!(d, r);
        }
        let gathered = embedding_lookup(EmbeddingTable::Dense(&table), &ids, EmbeddingReduce::None).unwrap();
        for (i, &id) in ids.iter().enumerate() {
            assert_eq!(gathered.row(i), table.row(id as usize));
        }
        let twice = embedding_lookup(EmbeddingTable::Relation(&rel), &[1, 1], EmbeddingReduce::Sum).unwrap();
        let want: Vec<f64> = table.row(1).iter().map(|v| v + v).collect();
        assert_eq!(twice.data(), &want[..]);
        assert!(embedding_lookup(EmbeddingTable::Dense(&table), &[50], EmbeddingReduce::None).is_err());
        assert!(embedding_lookup(EmbeddingTable::Relation(&rel), &[-1], EmbeddingReduce::None).is_err());
    }
}
