//! Step-at-a-time executor for lowered plans.

use std::time::Instant;

use super::lower::{ExecOp, ExecPlan};
use super::{JoinCombine, NodeKind, Predicate, ProjectSpec, PREDICTION};
use crate::cache::InferenceCache;
use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::linalg::{
    activation_as_map, add_as_join, matmul_aggregate, matmul_join, reblock, tile_row_vector, BlockPair, BlockSize,
    EmbeddingRelation, EmbeddingTable, Representation,
};
use crate::model::{class_label, Layer};
use crate::relational::{
    count_by, join_output, join_rows, BlockRelation, Column, DataType, ExecContext, Field, RowRelation, Schema, Value,
};
use crate::tensor::{apply_activation, dense_matmul, DenseTensor};

/// Feature matrix travelling with a batch of rows.
#[derive(Clone)]
pub enum Features {
    Dense(DenseTensor),
    Blocked(BlockRelation),
}

#[derive(Clone)]
struct Batch {
    rows: RowRelation,
    /// `None` when the batch is empty or carries no features.
    features: Option<Features>,
}

enum Slot {
    Batch(Batch),
    /// Output of a block join awaiting its aggregate.
    Joined {
        rows: RowRelation,
        a: BlockRelation,
        b: BlockRelation,
        pairs: Vec<BlockPair>,
    },
}

struct ProbeState {
    rows: RowRelation,
    hits: Vec<Option<Vec<f64>>>,
    miss_features: Option<DenseTensor>,
}

#[derive(Debug, Clone)]
pub struct ExecOutput {
    pub result: RowRelation,
    /// Rows that went through full model inference.
    pub inference_rows: u64,
    /// Wall-clock milliseconds per step.
    pub step_millis: Vec<f64>,
}

fn dense_features(f: Option<Features>, what: &str) -> Result<Option<DenseTensor>> {
    match f {
        None => Ok(None),
        Some(Features::Dense(t)) => Ok(Some(t)),
        Some(Features::Blocked(_)) => Err(Error::Plan(format!("{what} needs dense features"))),
    }
}

fn col_index(rel: &RowRelation, name: &str) -> Result<usize> {
    rel.schema()
        .index_of(name)
        .ok_or_else(|| Error::Plan(format!("column `{name}` is not available")))
}

/// Applies one operator in its dense form.
pub fn apply_dense(ctx: &ExecContext, kind: &NodeKind, x: DenseTensor) -> Result<DenseTensor> {
    match kind {
        NodeKind::MatMul { layer, cols } => {
            let Layer::Dense(d) = layer.layer() else {
                return Err(Error::Plan("matmul over a non-dense layer".into()));
            };
            match cols {
                None => d.matmul(ctx, &x),
                Some((start, len)) => {
                    let w = d.weights_t_rows(*start, *len)?;
                    ctx.install(|| dense_matmul(&x, &w))
                }
            }
        }
        NodeKind::AddBias { layer } => match layer.layer() {
            Layer::Dense(d) => d.add_bias(&x),
            _ => Err(Error::Plan("bias over a non-dense layer".into())),
        },
        NodeKind::Activation { kind } => apply_activation(&x, *kind),
        NodeKind::Conv2D { layer } => match layer.layer() {
            Layer::Conv2D(c) => c.forward(ctx, &x, layer.input_shape(), Representation::Udf, BlockSize::new(1, 1)),
            _ => Err(Error::Plan("conv2d over a non-conv layer".into())),
        },
        NodeKind::Flatten | NodeKind::Reblock { .. } => Ok(x),
        NodeKind::EmbeddingLookup { layer } => match layer.layer() {
            Layer::Embedding(e) => e.forward(&x, EmbeddingTable::Dense(e.table()?)),
            _ => Err(Error::Plan("embedding lookup over a non-embedding layer".into())),
        },
        NodeKind::MapUdf { ops } => ops.iter().try_fold(x, |acc, op| apply_dense(ctx, op, acc)),
        other => Err(Error::Plan(format!("{} is not a linear-algebra operator", other.name()))),
    }
}

fn scan(catalog: &Catalog, table: &str) -> Result<RowRelation> {
    let stored = catalog.table(table)?;
    Ok(stored.scan()?.rename(|c| format!("{table}.{c}")))
}

fn filter(b: Batch, preds: &[Predicate]) -> Result<Batch> {
    let idx = Predicate::select_rows(preds, &b.rows)?;
    let features = match dense_features(b.features, "filter")? {
        Some(t) if !idx.is_empty() => Some(Features::Dense(t.gather_rows(&idx).expect("row index in range"))),
        _ => None,
    };
    Ok(Batch {
        rows: b.rows.gather(&idx, true),
        features,
    })
}

fn project_features(b: Batch, keep: &[String], features: &[String]) -> Result<Batch> {
    let keep_idx = keep.iter().map(|c| col_index(&b.rows, c)).collect::<Result<Vec<_>>>()?;
    let feat_idx = features.iter().map(|c| col_index(&b.rows, c)).collect::<Result<Vec<_>>>()?;
    let n = b.rows.len();
    let features = if n == 0 || feat_idx.is_empty() {
        None
    } else {
        let mut data = Vec::with_capacity(n * feat_idx.len());
        for i in 0..n {
            for &c in &feat_idx {
                data.push(b.rows.column(c).f64_at(i).ok_or_else(|| {
                    Error::Plan(format!("feature column `{}` is not numeric", b.rows.schema().field(c).name))
                })?);
            }
        }
        Some(Features::Dense(DenseTensor::matrix(n, feat_idx.len(), data)?))
    };
    Ok(Batch {
        rows: b.rows.project(&keep_idx),
        features,
    })
}

fn project_prediction(b: Batch, keep: &[String], outputs: bool) -> Result<Batch> {
    let keep_idx: Vec<usize> = keep.iter().filter_map(|c| b.rows.schema().index_of(c)).collect();
    let kept = b.rows.project(&keep_idx);
    let y = dense_features(b.features, "prediction")?;
    let n = kept.len();
    let width = y.as_ref().map_or(0, |t| t.cols());
    let mut fields = vec![Field::new(PREDICTION, DataType::Int)];
    let mut columns = vec![Column::Int((0..n).map(|i| class_label(y.as_ref().unwrap().row(i))).collect())];
    if outputs {
        for j in 0..width {
            fields.push(Field::new(format!("out_{j}"), DataType::Float));
            columns.push(Column::Float((0..n).map(|i| y.as_ref().unwrap().get2(i, j)).collect()));
        }
    }
    let added = RowRelation::new(Schema::new(fields), columns, Vec::new())?;
    Ok(Batch {
        rows: RowRelation::hconcat(kept, added)?,
        features: None,
    })
}

fn join(l: Batch, r: Batch, left_key: &str, right_key: &str, combine: JoinCombine) -> Result<Batch> {
    let (lk, rk) = (col_index(&l.rows, left_key)?, col_index(&r.rows, right_key)?);
    let pairs = join_rows(&l.rows, &r.rows, &[lk], &[rk])?;
    let rows = join_output(&l.rows, &r.rows, &pairs)?;
    let (lf, rf) = (dense_features(l.features, "join")?, dense_features(r.features, "join")?);
    let features = if pairs.is_empty() {
        None
    } else {
        match (combine, lf, rf) {
            (_, None, None) => None,
            (JoinCombine::Concat, lf, rf) => {
                let (lw, rw) = (lf.as_ref().map_or(0, |t| t.cols()), rf.as_ref().map_or(0, |t| t.cols()));
                let mut data = Vec::with_capacity(pairs.len() * (lw + rw));
                for &(li, ri) in &pairs {
                    if let Some(t) = &lf {
                        data.extend_from_slice(t.row(li));
                    }
                    if let Some(t) = &rf {
                        data.extend_from_slice(t.row(ri));
                    }
                }
                Some(Features::Dense(DenseTensor::matrix(pairs.len(), lw + rw, data)?))
            }
            (JoinCombine::AddFeatures, Some(a), Some(b)) => {
                if a.cols() != b.cols() {
                    return Err(Error::Plan("feature sum over different widths".into()));
                }
                let mut data = Vec::with_capacity(pairs.len() * a.cols());
                for &(li, ri) in &pairs {
                    data.extend(a.row(li).iter().zip(b.row(ri)).map(|(x, y)| x + y));
                }
                Some(Features::Dense(DenseTensor::matrix(pairs.len(), a.cols(), data)?))
            }
            (JoinCombine::AddFeatures, ..) => return Err(Error::Plan("feature sum needs features on both sides".into())),
        }
    };
    Ok(Batch { rows, features })
}

fn aggregate(b: Batch, group_by: &Option<String>) -> Result<Batch> {
    let count = Field::new("count", DataType::Int);
    let rows = match group_by {
        None => RowRelation::new(Schema::new(vec![count]), vec![Column::Int(vec![b.rows.len() as i64])], Vec::new())?,
        Some(g) => {
            let c = col_index(&b.rows, g)?;
            let groups = count_by(&b.rows, c)?;
            let field = b.rows.schema().field(c).clone();
            let schema = Schema::new(vec![field, count]);
            RowRelation::from_rows(
                schema,
                groups.into_iter().map(|(k, n)| vec![Value::from(k), Value::Int(n)]).collect(),
            )?
        }
    };
    Ok(Batch { rows, features: None })
}

fn pop_batch(ins: &mut Vec<Slot>) -> Result<Batch> {
    match ins.remove(0) {
        Slot::Batch(b) => Ok(b),
        Slot::Joined { .. } => Err(Error::Plan("block join output used as a batch".into())),
    }
}

/// Runs `plan`. Model misses go through `cache` when the plan has a cache
/// probe.
pub fn execute(plan: &ExecPlan, catalog: &Catalog, ctx: &ExecContext, cache: Option<&InferenceCache>) -> Result<ExecOutput> {
    let n = plan.steps.len();
    if n == 0 {
        return Err(Error::Plan("empty plan".into()));
    }
    let mut remaining = vec![0usize; n];
    for s in &plan.steps {
        for &i in &s.inputs {
            remaining[i] += 1;
        }
    }
    let mut slots: Vec<Option<Slot>> = (0..n).map(|_| None).collect();
    let mut probe: Option<ProbeState> = None;
    let mut inference_rows = 0u64;
    let mut step_millis = Vec::with_capacity(n);

    for step in &plan.steps {
        let started = Instant::now();
        let take = |slots: &mut Vec<Option<Slot>>, remaining: &mut Vec<usize>, i: usize| -> Slot {
            remaining[i] -= 1;
            let slot = if remaining[i] == 0 {
                slots[i].take()
            } else {
                slots[i].as_ref().map(|s| match s {
                    Slot::Batch(b) => Slot::Batch(b.clone()),
                    Slot::Joined { rows, a, b, pairs } => Slot::Joined {
                        rows: rows.clone(),
                        a: a.clone(),
                        b: b.clone(),
                        pairs: pairs.clone(),
                    },
                })
            };
            slot.expect("step inputs run first")
        };
        let mut ins: Vec<Slot> = step.inputs.iter().map(|&i| take(&mut slots, &mut remaining, i)).collect();

        let out = match &step.op {
            ExecOp::Scan { table } => Slot::Batch(Batch {
                rows: scan(catalog, table)?,
                features: None,
            }),
            ExecOp::Filter { predicates } => Slot::Batch(filter(pop_batch(&mut ins)?, predicates)?),
            ExecOp::Project(ProjectSpec::Features { keep, features }) => Slot::Batch(project_features(pop_batch(&mut ins)?, keep, features)?),
            ExecOp::Project(ProjectSpec::Prediction { keep, outputs }) => {
                let b = pop_batch(&mut ins)?;
                if !matches!(plan.steps[step.inputs[0]].op, ExecOp::CacheMerge) {
                    inference_rows += b.rows.len() as u64;
                }
                Slot::Batch(project_prediction(b, keep, *outputs)?)
            }
            ExecOp::Project(ProjectSpec::Columns(cols)) => {
                let b = pop_batch(&mut ins)?;
                let idx = cols.iter().map(|c| col_index(&b.rows, c)).collect::<Result<Vec<_>>>()?;
                Slot::Batch(Batch {
                    rows: b.rows.project(&idx),
                    features: None,
                })
            }
            ExecOp::Join {
                left_key,
                right_key,
                combine,
            } => {
                let (l, r) = (pop_batch(&mut ins)?, pop_batch(&mut ins)?);
                Slot::Batch(join(l, r, left_key, right_key, *combine)?)
            }
            ExecOp::Aggregate { group_by } => Slot::Batch(aggregate(pop_batch(&mut ins)?, group_by)?),
            ExecOp::FusedUdf { ops } => {
                let b = pop_batch(&mut ins)?;
                let features = match dense_features(b.features, "fused UDF")? {
                    Some(x) => Some(Features::Dense(
                        ops.iter().try_fold(x, |acc, op| apply_dense(ctx, op, acc))?,
                    )),
                    None => None,
                };
                Slot::Batch(Batch { rows: b.rows, features })
            }
            ExecOp::Dense(kind) => {
                let b = pop_batch(&mut ins)?;
                let features = match dense_features(b.features, kind.name())? {
                    Some(x) => Some(Features::Dense(apply_dense(ctx, kind, x)?)),
                    None => None,
                };
                Slot::Batch(Batch { rows: b.rows, features })
            }
            ExecOp::Partition { rows, cols } => {
                let b = pop_batch(&mut ins)?;
                let features = match dense_features(b.features, "partition")? {
                    Some(x) => Some(Features::Blocked(BlockRelation::from_dense(ctx.pool(), &x, *rows, *cols)?)),
                    None => None,
                };
                Slot::Batch(Batch { rows: b.rows, features })
            }
            ExecOp::Reassemble => {
                let b = pop_batch(&mut ins)?;
                let features = match b.features {
                    Some(Features::Blocked(m)) => Some(Features::Dense(m.to_dense()?)),
                    other => other,
                };
                Slot::Batch(Batch { rows: b.rows, features })
            }
            ExecOp::Repartition { rows, cols } => {
                let b = pop_batch(&mut ins)?;
                let features = match b.features {
                    Some(Features::Blocked(m)) => Some(Features::Blocked(reblock(ctx, &m, *rows, *cols)?)),
                    other => other,
                };
                Slot::Batch(Batch { rows: b.rows, features })
            }
            ExecOp::BlockJoin { layer, cols } => {
                let b = pop_batch(&mut ins)?;
                match b.features {
                    None => Slot::Batch(b),
                    Some(Features::Dense(_)) => return Err(Error::Plan("block join needs blocked features".into())),
                    Some(Features::Blocked(a)) => {
                        let Layer::Dense(d) = layer.layer() else {
                            return Err(Error::Plan("matmul over a non-dense layer".into()));
                        };
                        let wt = match cols {
                            None => d.weights_t()?.clone(),
                            Some((s, l)) => d.weights_t_rows(*s, *l)?,
                        };
                        let w = BlockRelation::from_dense(ctx.pool(), &wt, a.block_cols, a.block_cols)?;
                        drop(wt);
                        let pairs = matmul_join(&a, &w)?;
                        Slot::Joined {
                            rows: b.rows,
                            a,
                            b: w,
                            pairs,
                        }
                    }
                }
            }
            ExecOp::BlockAggregate => match ins.remove(0) {
                Slot::Joined { rows, a, b, pairs } => Slot::Batch(Batch {
                    rows,
                    features: Some(Features::Blocked(matmul_aggregate(ctx, &a, &b, &pairs)?)),
                }),
                Slot::Batch(b) => Slot::Batch(b),
            },
            ExecOp::BlockAdd { layer } => {
                let b = pop_batch(&mut ins)?;
                let features = match b.features {
                    None => None,
                    Some(Features::Blocked(m)) => {
                        let Layer::Dense(d) = layer.layer() else {
                            return Err(Error::Plan("bias over a non-dense layer".into()));
                        };
                        let tiled = tile_row_vector(ctx.pool(), d.bias()?, &m)?;
                        Some(Features::Blocked(add_as_join(ctx, &m, &tiled)?))
                    }
                    Some(Features::Dense(_)) => return Err(Error::Plan("block add needs blocked features".into())),
                };
                Slot::Batch(Batch { rows: b.rows, features })
            }
            ExecOp::BlockMap { kind } => {
                let b = pop_batch(&mut ins)?;
                let features = match b.features {
                    None => None,
                    Some(Features::Blocked(m)) => Some(Features::Blocked(activation_as_map(ctx, &m, *kind)?)),
                    Some(Features::Dense(_)) => return Err(Error::Plan("block map needs blocked features".into())),
                };
                Slot::Batch(Batch { rows: b.rows, features })
            }
            ExecOp::ConvRelation { layer, block } => {
                let b = pop_batch(&mut ins)?;
                let features = match dense_features(b.features, "conv2d")? {
                    None => None,
                    Some(x) => match layer.layer() {
                        Layer::Conv2D(c) => Some(Features::Dense(c.forward(
                            ctx,
                            &x,
                            layer.input_shape(),
                            Representation::Relation,
                            *block,
                        )?)),
                        _ => return Err(Error::Plan("conv2d over a non-conv layer".into())),
                    },
                };
                Slot::Batch(Batch { rows: b.rows, features })
            }
            ExecOp::EmbeddingRelation { layer, block_rows } => {
                let b = pop_batch(&mut ins)?;
                let features = match dense_features(b.features, "embedding")? {
                    None => None,
                    Some(x) => match layer.layer() {
                        Layer::Embedding(e) => {
                            let table = e.table()?;
                            let rel = EmbeddingRelation::new(BlockRelation::from_dense(
                                ctx.pool(),
                                table,
                                *block_rows,
                                table.cols(),
                            )?);
                            Some(Features::Dense(e.forward(&x, EmbeddingTable::Relation(&rel))?))
                        }
                        _ => return Err(Error::Plan("embedding lookup over a non-embedding layer".into())),
                    },
                };
                Slot::Batch(Batch { rows: b.rows, features })
            }
            ExecOp::FlattenRelation => Slot::Batch(pop_batch(&mut ins)?),
            ExecOp::CacheProbe => {
                let b = pop_batch(&mut ins)?;
                let cache = cache.ok_or_else(|| Error::Plan("plan probes a cache but none is configured".into()))?;
                let x = dense_features(b.features, "cache probe")?;
                let mut hits = Vec::with_capacity(b.rows.len());
                let mut misses = Vec::new();
                if let Some(x) = &x {
                    for i in 0..x.rows() {
                        let hit = cache.lookup(x.row(i))?;
                        if hit.is_none() {
                            misses.push(i);
                        }
                        hits.push(hit);
                    }
                }
                let miss_features = x.as_ref().and_then(|t| t.gather_rows(&misses)).filter(|t| t.rows() > 0);
                let out = Batch {
                    rows: b.rows.gather(&misses, true),
                    features: miss_features.clone().map(Features::Dense),
                };
                probe = Some(ProbeState {
                    rows: b.rows,
                    hits,
                    miss_features,
                });
                Slot::Batch(out)
            }
            ExecOp::CacheMerge => {
                let _ = ins.remove(0);
                let fresh = pop_batch(&mut ins)?;
                inference_rows += fresh.rows.len() as u64;
                let state = probe.take().ok_or_else(|| Error::Plan("cache merge without a probe".into()))?;
                let cache = cache.ok_or_else(|| Error::Plan("plan merges a cache but none is configured".into()))?;
                let y = dense_features(fresh.features, "cache merge")?;
                if let (Some(x), Some(y)) = (&state.miss_features, &y) {
                    for i in 0..x.rows() {
                        cache.put(x.row(i), y.row(i).to_vec())?;
                    }
                }
                let mut next_miss = 0;
                let mut data = Vec::new();
                let mut width = 0;
                for hit in &state.hits {
                    let row = match hit {
                        Some(v) => v.as_slice(),
                        None => {
                            next_miss += 1;
                            y.as_ref().expect("misses were inferred").row(next_miss - 1)
                        }
                    };
                    width = row.len();
                    data.extend_from_slice(row);
                }
                let features = if state.hits.is_empty() {
                    None
                } else {
                    Some(Features::Dense(DenseTensor::matrix(state.hits.len(), width, data)?))
                };
                Slot::Batch(Batch {
                    rows: state.rows,
                    features,
                })
            }
        };
        if remaining[step.id] > 0 || step.id == n - 1 {
            slots[step.id] = Some(out);
        }
        step_millis.push(started.elapsed().as_secs_f64() * 1e3);
    }

    let last = slots[n - 1].take().expect("root ran");
    let result = match last {
        Slot::Batch(b) => match b.features {
            // Model-only plans end with features; expose them as columns.
            Some(f) => {
                let y = match f {
                    Features::Dense(t) => t,
                    Features::Blocked(m) => m.to_dense()?,
                };
                let fields = (0..y.cols()).map(|j| Field::new(format!("out_{j}"), DataType::Float)).collect();
                let cols = (0..y.cols())
                    .map(|j| Column::Float((0..y.rows()).map(|i| y.get2(i, j)).collect()))
                    .collect();
                RowRelation::new(Schema::new(fields), cols, Vec::new())?
            }
            None => b.rows,
        },
        Slot::Joined { .. } => return Err(Error::Plan("plan ends in a block join".into())),
    };
    Ok(ExecOutput {
        result,
        inference_rows,
        step_millis,
    })
}
