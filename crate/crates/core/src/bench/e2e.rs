use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{dense_forward, label, RawDense};
use super::{elapsed_ms, model_from_raw, random_dense, uniform, BenchOptions, Record, Suite};
use crate::cache::{CacheConfig, CacheMode};
use crate::engine::{Engine, EngineConfig};
use crate::error::{Error, Result};
use crate::linalg::BlockSize;
use crate::relational::Value;
use crate::sql::IngestOptions;
use crate::tensor::ActivationKind;

pub const ROWS: usize = 10_000;
pub const FEATURES: usize = 8;
pub const DAYS: usize = 7;
pub const HYBRID_THRESHOLD: u64 = 2_000_000;
pub const QUERY: &str = "SELECT count(*) FROM transactions WHERE fraud.predict(*) = True GROUP BY day";

fn write_csv(path: &Path, days: &[usize], features: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(e.to_string()))?;
    let mut header = vec!["id".to_string(), "day".to_string()];
    header.extend((0..FEATURES).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| Error::invalid(e.to_string()))?;
    for (i, (day, x)) in days.iter().zip(features).enumerate() {
        let mut rec = vec![i.to_string(), format!("day{day}")];
        rec.extend(x.iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| Error::invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Shifts the output bias so roughly half the rows predict class 1.
fn balance(layers: &mut [RawDense], features: &[Vec<f64>]) {
    let (hidden, last) = layers.split_at_mut(layers.len() - 1);
    let out = &mut last[0];
    let mut margins: Vec<f64> = features
        .iter()
        .map(|x| {
            let h = dense_forward(hidden, x);
            let dot = |u: usize| out.weights[u * out.in_dim..][..out.in_dim].iter().zip(&h).map(|(w, v)| w * v).sum::<f64>();
            dot(1) - dot(0)
        })
        .collect();
    margins.sort_by(f64::total_cmp);
    out.bias = vec![0.0, -margins[margins.len() / 2]];
}

fn le_floats(path: &Path) -> Result<Vec<f64>> {
    Ok(fs::read(path)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Reads the manifest and weight files directly, without the engine's
/// loader.
fn oracle_layers(manifest: &Path) -> Result<Vec<RawDense>> {
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(manifest)?).map_err(|e| Error::invalid(e.to_string()))?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut in_dim = doc["input_dim"].as_u64().ok_or_else(|| Error::invalid("manifest without input_dim"))? as usize;
    let mut out = Vec::new();
    for l in doc["layers"].as_array().ok_or_else(|| Error::invalid("manifest without layers"))? {
        let units = l["units"].as_u64().ok_or_else(|| Error::invalid("layer without units"))? as usize;
        let file = |k: &str| l[k].as_str().map(|f| dir.join(f)).ok_or_else(|| Error::invalid(format!("layer without {k}")));
        out.push(RawDense {
            in_dim,
            units,
            weights: le_floats(&file("weights")?)?,
            bias: le_floats(&file("bias")?)?,
            activation: l["activation"].as_str().unwrap_or("relu").parse()?,
        });
        in_dim = units;
    }
    Ok(out)
}

/// CSV to per-row forward pass to per-day count of positive labels.
fn oracle_counts(csv_path: &Path, layers: &[RawDense]) -> Result<BTreeMap<String, i64>> {
    let mut rdr = csv::Reader::from_path(csv_path).map_err(|e| Error::invalid(e.to_string()))?;
    let mut counts = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::invalid(e.to_string()))?;
        let x: Vec<f64> = (0..FEATURES)
            .map(|j| rec[2 + j].parse::<f64>().map_err(|e| Error::invalid(e.to_string())))
            .collect::<Result<_>>()?;
        if label(&dense_forward(layers, &x)) == 1 {
            *counts.entry(rec[1].to_string()).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

fn engine_counts(rows: &crate::relational::RowRelation) -> BTreeMap<String, i64> {
    (0..rows.len())
        .filter_map(|i| match (rows.value(i, 0), rows.value(i, 1)) {
            (Value::Str(d), Value::Int(c)) => Some((d, c)),
            _ => None,
        })
        .collect()
}

pub fn run(opts: &BenchOptions, seed: u64) -> Result<Vec<Record>> {
    let scratch = opts.scratch("e2e")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let csv_path = scratch.path.join("transactions.csv");
    let days: Vec<usize> = (0..ROWS).map(|_| rng.random_range(0..DAYS)).collect();
    let features: Vec<Vec<f64>> = (0..ROWS).map(|_| uniform(&mut rng, FEATURES).iter().map(|v| 3.0 * v).collect()).collect();
    write_csv(&csv_path, &days, &features)?;
    let (_, mut layers) = random_dense(
        &mut rng,
        "fraud",
        &[FEATURES, 16, 2],
        &[ActivationKind::Relu, ActivationKind::Softmax],
    )?;
    balance(&mut layers, &features);
    let model = model_from_raw("fraud", &layers)?;
    let manifest = model.save(&scratch.path.join("model"))?;
    let want = oracle_counts(&csv_path, &oracle_layers(&manifest)?)?;

    let exact = CacheConfig {
        mode: CacheMode::Exact,
        ..CacheConfig::default()
    };
    let configs = [
        ("udf_forced", u64::MAX, CacheConfig::default()),
        ("relation_forced", 0, CacheConfig::default()),
        ("hybrid", HYBRID_THRESHOLD, CacheConfig::default()),
        ("hybrid_exact_cache", HYBRID_THRESHOLD, exact),
    ];
    let mut records = Vec::new();
    for (name, threshold, cache) in configs {
        let started = Instant::now();
        let e = Engine::new(EngineConfig {
            memory_threshold_bytes: threshold,
            buffer_pool_bytes: 64 << 20,
            block: BlockSize::new(1024, 8),
            workers: opts.workers,
            cache,
            ..EngineConfig::default()
        })?;
        e.ingest_csv(
            "transactions",
            &csv_path,
            &IngestOptions {
                keys: vec!["id".into()],
                ..IngestOptions::default()
            },
        )?;
        e.load_model("fraud", &manifest)?;
        let explain = e.explain(QUERY).map_err(|q| q.source)?;
        let reprs: Vec<&str> = explain.lines().filter_map(|l| l.split('\t').nth(2)).collect();
        let shape_ok = match name {
            "udf_forced" => !reprs.contains(&"RELATION"),
            "relation_forced" => !reprs.contains(&"UDF"),
            _ => reprs.contains(&"RELATION") && reprs.contains(&"UDF"),
        };
        let first = e.run_query(QUERY).map_err(|q| q.source)?;
        let got = engine_counts(&first.rows);
        let mut rec = Record::new(Suite::E2e, name)
            .config("rows", ROWS as u64)
            .config("threshold_bytes", threshold)
            .config("cache", cache.mode.to_string())
            .value("groups", got.len() as u64)
            .value("positives", got.values().sum::<i64>())
            .value("inference_rows", first.report.inference_rows)
            .verdict("counts_equal_oracle", got == want)
            .verdict("representations", shape_ok);
        if cache.mode != CacheMode::Off {
            let again = e.run_query(QUERY).map_err(|q| q.source)?;
            let hits = again.report.cache.map_or(0, |c| c.hits);
            rec = rec
                .value("repeat_inference_rows", again.report.inference_rows)
                .value("repeat_cache_hits", hits)
                .verdict("repeat_counts_equal_oracle", engine_counts(&again.rows) == want)
                .verdict("repeat_served_from_cache", again.report.inference_rows == 0 && hits == ROWS as u64);
        }
        records.push(rec.timing_ms("elapsed_ms", elapsed_ms(started)));
    }
    records.push(
        Record::new(Suite::E2e, "oracle")
            .value("groups", want.len() as u64)
            .value("positives", want.values().sum::<i64>())
            .verdict("nontrivial", want.values().sum::<i64>() > 0 && want.values().sum::<i64>() < ROWS as i64),
    );
    Ok(records)
}
