use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::oracle::naive_matmul;
use super::{elapsed_ms, random_dense, rel_err, uniform, BenchOptions, FloatDigest, Record, Suite};
use crate::engine::{Engine, EngineConfig, QueryResult};
use crate::error::{Error, Result};
use crate::ir::lower::ExecOp;
use crate::ir::{NodeKind, OptimizerConfig};
use crate::model::Model;
use crate::relational::{Column, DataType, Field, RowRelation, Schema, Value};
use crate::tensor::{ActivationKind, DenseTensor};

pub const ROWS_PER_SIDE: usize = 50_000;
pub const FEATURES_PER_SIDE: usize = 484;
pub const OUTPUTS: usize = 256;
/// Each join key appears this many times on each side.
pub const KEY_MULTIPLICITY: usize = 2;
pub const TOLERANCE: f64 = 1e-9;

const QUERY: &str = "SELECT m.predict(*) FROM d1, d2 WHERE d1.k = d2.k";

/// `rid, k, <prefix>0 ..` with `k = rid / KEY_MULTIPLICITY`.
fn side(key: &str, prefix: &str, features: &[Vec<f64>]) -> Result<RowRelation> {
    let n = features.len();
    let width = features.first().map_or(0, Vec::len);
    let mut fields = vec![Field::new(key, DataType::Int), Field::new("k", DataType::Int)];
    let mut columns = vec![
        Column::Int((0..n as i64).collect()),
        Column::Int((0..n).map(|i| (i / KEY_MULTIPLICITY) as i64).collect()),
    ];
    for j in 0..width {
        fields.push(Field::new(format!("{prefix}{j}"), DataType::Float));
        columns.push(Column::Float(features.iter().map(|r| r[j]).collect()));
    }
    RowRelation::new(Schema::new(fields), columns, vec![0])
}

fn engine(pool_bytes: u64, workers: usize) -> Result<Engine> {
    Engine::new(EngineConfig {
        buffer_pool_bytes: pool_bytes,
        workers,
        ..EngineConfig::default()
    })
}

/// Result rows keyed by `(d1.r1, d2.r2)` in key order, with their outputs.
fn keyed_outputs(r: &QueryResult, width: usize) -> Result<Vec<((i64, i64), Vec<f64>)>> {
    let schema = r.rows.schema();
    let col = |name: &str| schema.index_of(name).ok_or_else(|| Error::invalid(format!("result has no `{name}`")));
    let (r1, r2) = (col("d1.r1")?, col("d2.r2")?);
    let outs = (0..width).map(|j| col(&format!("out_{j}"))).collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<_> = (0..r.rows.len())
        .map(|i| {
            let key = match (r.rows.value(i, r1), r.rows.value(i, r2)) {
                (Value::Int(a), Value::Int(b)) => (a, b),
                _ => (-1, -1),
            };
            (key, outs.iter().map(|&c| r.rows.column(c).f64_at(i).unwrap_or(f64::NAN)).collect())
        })
        .collect();
    rows.sort_by_key(|(k, _)| *k);
    Ok(rows)
}

fn optimizer(e: &Engine, pushdown: bool) -> OptimizerConfig {
    OptimizerConfig {
        pushdown_enabled: pushdown,
        ..e.config().optimizer()
    }
}

/// Runs the query without and then with the rewrite; returns each result
/// with its wall-clock milliseconds.
fn run_both(e: &Engine) -> Result<[(QueryResult, f64); 2]> {
    let run = |pushdown| -> Result<(QueryResult, f64)> {
        let started = Instant::now();
        let r = e.run_query_with(QUERY, &optimizer(e, pushdown)).map_err(|q| q.source)?;
        Ok((r, elapsed_ms(started)))
    };
    Ok([run(false)?, run(true)?])
}

fn exact_case(workers: usize) -> Result<Record> {
    // Integer features and weights keep every product exact.
    let f1: Vec<Vec<f64>> = (0..8).map(|i| (0..3).map(|j| ((i * 3 + j) % 7) as f64 - 3.0).collect()).collect();
    let f2: Vec<Vec<f64>> = (0..8).map(|i| (0..5).map(|j| ((i * 5 + j) % 5) as f64 - 2.0).collect()).collect();
    let w: Vec<f64> = (0..4 * 8).map(|i| (i % 9) as f64 - 4.0).collect();
    let bias = vec![1.0, -1.0, 0.5, 0.0];
    let model = Model::dense(
        "m",
        vec![(
            DenseTensor::matrix(4, 8, w.clone())?,
            DenseTensor::new(vec![4], bias.clone())?,
            ActivationKind::Identity,
        )],
    )?;
    let e = engine(32 << 20, workers)?;
    e.create_table("d1", &side("r1", "a", &f1)?)?;
    e.create_table("d2", &side("r2", "b", &f2)?)?;
    e.register_model(model)?;
    let [orig, rewritten] = run_both(&e)?;

    // Oracle: concatenate per joined pair and multiply by W^T.
    let mut want = Vec::new();
    for (i, a) in f1.iter().enumerate() {
        for (j, b) in f2.iter().enumerate() {
            if i / KEY_MULTIPLICITY == j / KEY_MULTIPLICITY {
                let x: Vec<f64> = a.iter().chain(b).copied().collect();
                let wt: Vec<f64> = (0..8).flat_map(|p| (0..4).map(move |u| (p, u))).map(|(p, u)| w[u * 8 + p]).collect();
                let y = naive_matmul(&x, &wt, 1, 8, 4);
                want.push(((i as i64, j as i64), y.iter().zip(&bias).map(|(v, b)| v + b).collect::<Vec<_>>()));
            }
        }
    }
    let got_orig = keyed_outputs(&orig.0, 4)?;
    let got_rw = keyed_outputs(&rewritten.0, 4)?;
    Ok(Record::new(Suite::Pushdown, "exact_small")
        .config("rows_per_side", 8u64)
        .config("features", "3+5")
        .config("outputs", 4u64)
        .value("joined_rows", got_rw.len() as u64)
        .verdict("original_exact", got_orig == want)
        .verdict("rewritten_exact", got_rw == want))
}

pub fn run(opts: &BenchOptions, seed: u64) -> Result<Vec<Record>> {
    let mut records = vec![exact_case(opts.workers)?];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let started = Instant::now();
    let (model, _) = random_dense(
        &mut rng,
        "m",
        &[2 * FEATURES_PER_SIDE, OUTPUTS],
        &[ActivationKind::Identity],
    )?;
    let e = engine(1 << 30, opts.workers)?;
    for (name, key, prefix) in [("d1", "r1", "a"), ("d2", "r2", "b")] {
        let features: Vec<Vec<f64>> = (0..ROWS_PER_SIDE).map(|_| uniform(&mut rng, FEATURES_PER_SIDE)).collect();
        e.create_table(name, &side(key, prefix, &features)?)?;
    }
    e.register_model(model)?;
    let generate_ms = elapsed_ms(started);

    let [(orig, orig_ms), (rw, rw_ms)] = run_both(&e)?;
    let split = count_split(&e, true)?;
    let unsplit = count_split(&e, false)?;

    let a = keyed_outputs(&orig, OUTPUTS)?;
    let b = keyed_outputs(&rw, OUTPUTS)?;
    let keys_match = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.0 == y.0);
    let mut worst = 0.0f64;
    let mut digest = FloatDigest::default();
    for (x, y) in a.iter().zip(&b) {
        worst = worst.max(rel_err(&y.1, &x.1));
        digest.update(&y.1);
    }
    let expected_rows = ROWS_PER_SIDE * KEY_MULTIPLICITY;
    let speedup = orig_ms / rw_ms;
    records.push(
        Record::new(Suite::Pushdown, "scaled_join")
            .config("rows_per_side", ROWS_PER_SIDE as u64)
            .config("features_per_side", FEATURES_PER_SIDE as u64)
            .config("outputs", OUTPUTS as u64)
            .config("key_multiplicity", KEY_MULTIPLICITY as u64)
            .config("tolerance", TOLERANCE)
            .value("joined_rows", b.len() as u64)
            .value("partial_product_steps", split as u64)
            .value("partial_product_steps_without_rewrite", unsplit as u64)
            .value("max_rel_err", worst)
            .value("result_digest", digest.finish())
            .verdict("rewrite_applied", split == 2 && unsplit == 0)
            .verdict("row_sets_equal", keys_match && b.len() == expected_rows)
            .verdict("outputs_equal", keys_match && worst <= TOLERANCE)
            .timing_ms("generate_ms", generate_ms)
            .timing_ms("original_ms", orig_ms)
            .timing_ms("rewritten_ms", rw_ms)
            .measure("speedup", speedup)
            .measured_verdict("speedup_above_1", speedup > 1.0),
    );
    Ok(records)
}

/// Fused steps that start with a column-restricted product, i.e. one side
/// of a pushed-down layer.
fn count_split(e: &Engine, pushdown: bool) -> Result<usize> {
    let plan = e.plan_with(QUERY, &optimizer(e, pushdown)).map_err(|q| q.source)?;
    Ok(plan
        .steps
        .iter()
        .filter(|s| match &s.op {
            ExecOp::FusedUdf { ops } => matches!(ops.first(), Some(NodeKind::MatMul { cols: Some(_), .. })),
            _ => false,
        })
        .count())
}
