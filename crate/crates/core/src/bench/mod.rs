//! Benchmark harness. Each suite runs one experiment against independent
//! oracles and reports measured values, correctness verdicts and measurements as
//! JSON lines.
//!
//! Everything except the `measured` and `measured_verdicts` fields is a
//! pure function of the seed, so [`BenchReport::canonical`] is identical
//! across runs and worker counts. Latencies and buffer-pool counters depend
//! on scheduling and go in `measured`.

mod cache;
mod conv;
mod e2e;
mod fusion;
mod matmul;
mod oom;
mod optimizer;
pub mod oracle;
mod pushdown;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::catalog::Catalog;
use crate::ir::build::input_columns;
use crate::ir::lower::LowerOptions;
use crate::ir::{execute, lower_plan, model_plan, optimize, OptimizerConfig, Plan};
use crate::relational::{BufferPool, Column, DataType, ExecContext, Field, RowRelation, Schema};
use crate::tensor::{ActivationKind, DenseTensor};
use oracle::RawDense;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    Matmul,
    Conv,
    Optimizer,
    Pushdown,
    Oom,
    Fusion,
    Cache,
    E2e,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Matmul,
        Suite::Conv,
        Suite::Optimizer,
        Suite::Oom,
        Suite::Pushdown,
        Suite::Fusion,
        Suite::Cache,
        Suite::E2e,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Matmul => "matmul",
            Suite::Conv => "conv",
            Suite::Optimizer => "optimizer",
            Suite::Pushdown => "pushdown",
            Suite::Oom => "oom",
            Suite::Fusion => "fusion",
            Suite::Cache => "cache",
            Suite::E2e => "e2e",
        }
    }

    /// Distinct stream per suite so suites never share random draws.
    fn salt(self) -> u64 {
        Suite::ALL.iter().position(|s| *s == self).unwrap() as u64 + 1
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Suite::ALL.iter().map(|s| s.name()).collect();
                Error::invalid(format!("unknown suite `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchOptions {
    pub seed: u64,
    pub workers: usize,
    /// Spill files and generated inputs go here; a temporary directory is
    /// used when unset.
    pub work_dir: Option<PathBuf>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            seed: 42,
            workers: 1,
            work_dir: None,
        }
    }
}

impl BenchOptions {
    fn suite_seed(&self, suite: Suite) -> u64 {
        self.seed ^ suite.salt().wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }

    /// A scratch directory that lives as long as the returned guard.
    fn scratch(&self, name: &str) -> Result<Scratch> {
        match &self.work_dir {
            Some(dir) => {
                let path = dir.join(name);
                if path.exists() {
                    fs::remove_dir_all(&path)?;
                }
                fs::create_dir_all(&path)?;
                Ok(Scratch { path, _tmp: None })
            }
            None => {
                let tmp = tempfile::Builder::new().prefix(&format!("relinfer-{name}-")).tempdir()?;
                Ok(Scratch {
                    path: tmp.path().to_path_buf(),
                    _tmp: Some(tmp),
                })
            }
        }
    }
}

struct Scratch {
    path: PathBuf,
    _tmp: Option<tempfile::TempDir>,
}

/// One report line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub suite: String,
    pub case: String,
    pub config: Map<String, Value>,
    pub values: Map<String, Value>,
    pub verdicts: Map<String, Value>,
    pub measured: Map<String, Value>,
    pub measured_verdicts: Map<String, Value>,
}

impl Record {
    pub fn new(suite: Suite, case: impl Into<String>) -> Self {
        Record {
            suite: suite.name().into(),
            case: case.into(),
            config: Map::new(),
            values: Map::new(),
            verdicts: Map::new(),
            measured: Map::new(),
            measured_verdicts: Map::new(),
        }
    }

    pub fn config(mut self, key: &str, v: impl Into<Value>) -> Self {
        self.config.insert(key.into(), v.into());
        self
    }

    pub fn value(mut self, key: &str, v: impl Into<Value>) -> Self {
        self.values.insert(key.into(), v.into());
        self
    }

    pub fn verdict(mut self, key: &str, pass: bool) -> Self {
        self.verdicts.insert(key.into(), pass.into());
        self
    }

    pub fn measure(mut self, key: &str, v: impl Into<Value>) -> Self {
        self.measured.insert(key.into(), v.into());
        self
    }

    pub fn timing_ms(self, key: &str, ms: f64) -> Self {
        self.measure(key, ms)
    }

    pub fn measured_verdict(mut self, key: &str, pass: bool) -> Self {
        self.measured_verdicts.insert(key.into(), pass.into());
        self
    }

    /// Names of verdicts that did not pass, measured verdicts included.
    pub fn failures(&self) -> Vec<String> {
        self.verdicts
            .iter()
            .chain(&self.measured_verdicts)
            .filter(|(_, v)| v.as_bool() != Some(true))
            .map(|(k, _)| format!("{}/{}/{k}", self.suite, self.case))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BenchReport {
    pub records: Vec<Record>,
}

impl BenchReport {
    pub fn extend(&mut self, other: BenchReport) {
        self.records.extend(other.records);
    }

    pub fn failures(&self) -> Vec<String> {
        self.records.iter().flat_map(Record::failures).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn suite(&self, suite: Suite) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.suite == suite.name())
    }

    pub fn record(&self, suite: Suite, case: &str) -> Option<&Record> {
        self.suite(suite).find(|r| r.case == case)
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    /// The report without measurements, one line per record.
    pub fn canonical(&self) -> String {
        self.records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.measured.clear();
                r.measured_verdicts.clear();
                serde_json::to_string(&r).expect("records serialize") + "\n"
            })
            .collect()
    }

    pub fn canonical_digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

pub fn run_suite(suite: Suite, opts: &BenchOptions) -> Result<BenchReport> {
    let started = Instant::now();
    let seed = opts.suite_seed(suite);
    let mut records = match suite {
        Suite::Matmul => matmul::run(opts, seed)?,
        Suite::Conv => conv::run(opts, seed)?,
        Suite::Optimizer => optimizer::run(opts, seed)?,
        Suite::Oom => oom::run(opts, seed)?,
        Suite::Pushdown => pushdown::run(opts, seed)?,
        Suite::Fusion => fusion::run(opts, seed)?,
        Suite::Cache => cache::run(opts, seed)?,
        Suite::E2e => e2e::run(opts, seed)?,
    };
    records.push(
        Record::new(suite, "suite")
            .config("seed", opts.seed)
            .timing_ms("total_ms", elapsed_ms(started)),
    );
    Ok(BenchReport { records })
}

pub fn run_suites(suites: &[Suite], opts: &BenchOptions) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    for &s in suites {
        report.extend(run_suite(s, opts)?);
    }
    Ok(report)
}

/// Execution context over a temporary pool.
fn context(budget: u64, workers: usize) -> Result<ExecContext> {
    ExecContext::new(Arc::new(BufferPool::temporary(budget)?), workers, None)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Random dense chain over `dims` with the given activations, returned both
/// as a model and as raw parameters for the oracle.
fn random_dense(rng: &mut ChaCha8Rng, name: &str, dims: &[usize], acts: &[ActivationKind]) -> Result<(Model, Vec<RawDense>)> {
    let mut raw = Vec::new();
    for (w, &activation) in dims.windows(2).zip(acts) {
        let (in_dim, units) = (w[0], w[1]);
        let scale = 1.0 / (in_dim as f64).sqrt();
        let weights: Vec<f64> = uniform(rng, units * in_dim).into_iter().map(|v| v * scale).collect();
        let bias = uniform(rng, units);
        raw.push(RawDense {
            in_dim,
            units,
            weights,
            bias,
            activation,
        });
    }
    Ok((model_from_raw(name, &raw)?, raw))
}

fn model_from_raw(name: &str, raw: &[RawDense]) -> Result<Model> {
    let layers = raw
        .iter()
        .map(|l| {
            Ok((
                DenseTensor::matrix(l.units, l.in_dim, l.weights.clone())?,
                DenseTensor::new(vec![l.units], l.bias.clone())?,
                l.activation,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Model::dense(name, layers)
}

/// Table `input` with float columns `x0..` as read by model-only plans.
fn input_relation(rows: &[Vec<f64>], width: usize) -> Result<RowRelation> {
    let fields = input_columns(width).into_iter().map(|c| Field::new(c, DataType::Float)).collect();
    let columns = (0..width).map(|j| Column::Float(rows.iter().map(|r| r[j]).collect())).collect();
    RowRelation::new(Schema::new(fields), columns, Vec::new())
}

/// The `out_j` columns of a model-only plan's result, row by row.
fn output_rows(result: &RowRelation, width: usize) -> Result<Vec<Vec<f64>>> {
    let idx = (0..width)
        .map(|j| {
            result
                .schema()
                .index_of(&format!("out_{j}"))
                .ok_or_else(|| Error::invalid(format!("result has no column out_{j}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..result.len())
        .map(|i| idx.iter().map(|&c| result.column(c).f64_at(i).unwrap_or(f64::NAN)).collect())
        .collect())
}

/// Optimizes, lowers and runs `model` over the `input` table of `catalog`.
fn run_model_plan(
    ctx: &ExecContext,
    catalog: &Catalog,
    model: &Arc<Model>,
    batch: u64,
    cfg: &OptimizerConfig,
) -> Result<(Plan, Vec<Vec<f64>>)> {
    let plan = optimize(&model_plan(model, batch), cfg);
    let exec = lower_plan(
        &plan,
        LowerOptions {
            block: cfg.block,
            cache: false,
        },
    )?;
    let out = execute(&exec, catalog, ctx, None)?;
    let rows = output_rows(&out.result, model.output().len())?;
    Ok((plan, rows))
}

fn elapsed_ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Norm-wise relative error `max|got - want| / max|want|`; infinite on a
/// length mismatch or a non-finite value.
pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    if got.len() != want.len() {
        return f64::INFINITY;
    }
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (g, w) in got.iter().zip(want) {
        if !g.is_finite() || !w.is_finite() {
            return f64::INFINITY;
        }
        diff = diff.max((g - w).abs());
        scale = scale.max(w.abs());
    }
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

/// Incremental SHA-256 over the bit patterns of floats.
#[derive(Default)]
pub struct FloatDigest(Sha256);

impl FloatDigest {
    pub fn update(&mut self, data: &[f64]) {
        for v in data {
            self.0.update(v.to_bits().to_le_bytes());
        }
    }

    pub fn update_i64(&mut self, data: &[i64]) {
        for v in data {
            self.0.update(v.to_le_bytes());
        }
    }

    pub fn finish(self) -> String {
        hex::encode(&self.0.finalize()[..16])
    }
}

/// Digest over a sequence of digests.
pub fn digest_strings(parts: &[String]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

pub fn float_digest(data: &[f64]) -> String {
    let mut d = FloatDigest::default();
    d.update(data);
    d.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn canonical_form_drops_measurements() {
        let a = BenchReport {
            records: vec![Record::new(Suite::Matmul, "x").value("n", 3).verdict("ok", true).timing_ms("t", 1.0)],
        };
        let mut b = a.clone();
        b.records[0] = b.records[0].clone().timing_ms("t", 2.0).measured_verdict("fast", false);
        assert_ne!(a.to_jsonl(), b.to_jsonl());
        assert_eq!(a.canonical(), b.canonical());
        assert!(a.passed());
        assert_eq!(b.failures(), ["matmul/x/fast"]);
    }

    #[test]
    fn field_order_is_fixed() {
        let line = BenchReport {
            records: vec![Record::new(Suite::Cache, "c")],
        }
        .to_jsonl();
        let keys = ["suite", "case", "config", "values", "verdicts", "measured", "measured_verdicts"];
        let pos: Vec<usize> = keys.iter().map(|k| line.find(&format!("\"{k}\"")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{line}");
    }

    #[test]
    fn relative_error() {
        assert_eq!(rel_err(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((rel_err(&[1.0, 2.5], &[1.0, 2.0]) - 0.25).abs() < 1e-15);
        assert_eq!(rel_err(&[1.0], &[1.0, 2.0]), f64::INFINITY);
        assert_eq!(rel_err(&[f64::NAN], &[1.0]), f64::INFINITY);
    }
}
