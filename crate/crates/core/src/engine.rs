//! Query driver: configuration, catalog, caches and the parse, bind, plan,
//! execute pipeline with its report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;
use serde::Serialize;

use crate::cache::{CacheConfig, CacheMode, CacheStats, InferenceCache};
use crate::catalog::Catalog;
use crate::error::{Error, Phase, QueryError, Result};
use crate::ir::lower::LowerOptions;
use crate::ir::optimize::DEFAULT_THRESHOLD;
use crate::ir::{build_ir, execute, lower_plan, optimize, ExecPlan, ExplainLine, OptimizerConfig};
use crate::linalg::BlockSize;
use crate::model::Model;
use crate::relational::{BufferPool, ExecContext, PoolStats, RowRelation};
use crate::sql::{bind, ingest_csv, parse_query, IngestOptions};

/// Name of the lock file guarding a spill directory.
pub const LOCK_FILE: &str = "relinfer.lock";

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub memory_threshold_bytes: u64,
    pub buffer_pool_bytes: u64,
    pub block: BlockSize,
    /// `None` spills into a private temporary directory.
    pub spill_dir: Option<PathBuf>,
    pub workers: usize,
    pub cache: CacheConfig,
    pub seed: u64,
    pub pushdown: bool,
    pub pushdown_width_ratio: f64,
    pub fusion: bool,
    /// Hard cap on bytes held by dense operators; `None` is unbounded.
    pub dense_cap_bytes: Option<u64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            memory_threshold_bytes: DEFAULT_THRESHOLD,
            buffer_pool_bytes: 1 << 30,
            block: BlockSize::new(1000, 1000),
            spill_dir: None,
            workers: 1,
            cache: CacheConfig::default(),
            seed: 0,
            pushdown: true,
            pushdown_width_ratio: 1.0,
            fusion: true,
            dense_cap_bytes: None,
        }
    }
}

impl EngineConfig {
    /// Smallest pool that can hold the operands and result of one block
    /// product at once.
    pub fn min_pool_bytes(&self) -> u64 {
        3 * (self.block.rows as u64) * (self.block.cols as u64) * 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.block.rows == 0 || self.block.cols == 0 {
            return Err(Error::invalid("block size must be positive"));
        }
        if self.buffer_pool_bytes < self.min_pool_bytes() {
            return Err(Error::invalid(format!(
                "buffer pool of {} bytes is below the {} bytes three {}x{} blocks need",
                self.buffer_pool_bytes,
                self.min_pool_bytes(),
                self.block.rows,
                self.block.cols
            )));
        }
        if self.workers == 0 {
            return Err(Error::invalid("worker count must be at least 1"));
        }
        if !(self.pushdown_width_ratio > 0.0 && self.pushdown_width_ratio.is_finite()) {
            return Err(Error::invalid("push-down width ratio must be positive"));
        }
        self.cache.validate()
    }

    /// Push-down is switched off while caching: the cache is keyed by the
    /// full joined feature vector, which the rewrite never materializes.
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            memory_threshold_bytes: self.memory_threshold_bytes,
            block: self.block,
            pushdown_enabled: self.pushdown && self.cache.mode == CacheMode::Off,
            pushdown_width_ratio: self.pushdown_width_ratio,
            fusion_enabled: self.fusion,
        }
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = self.optimizer().warnings();
        if self.memory_threshold_bytes == 0 {
            out.push("memory threshold 0 runs every operator relation-centric".into());
        }
        out
    }
}

/// Exclusive claim on a spill directory, released when dropped.
#[derive(Debug)]
struct SpillLock {
    _file: File,
}

impl SpillLock {
    fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(&path)?;
        match file.try_lock() {
            Ok(()) => Ok(SpillLock { _file: file }),
            Err(std::fs::TryLockError::WouldBlock) => Err(Error::invalid(format!(
                "spill directory {} is in use by another process",
                dir.display()
            ))),
            Err(std::fs::TryLockError::Error(e)) => Err(Error::Io(e)),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageMillis {
    pub parse: f64,
    pub bind: f64,
    pub plan: f64,
    pub execute: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeReport {
    pub id: usize,
    pub kind: String,
    pub representation: String,
    pub est_bytes: u64,
    pub out_shape: String,
}

impl From<ExplainLine> for NodeReport {
    fn from(l: ExplainLine) -> Self {
        NodeReport {
            id: l.id,
            kind: l.kind,
            representation: l.repr,
            est_bytes: l.est_bytes,
            out_shape: l.out_shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryReport {
    pub query: String,
    pub nodes: Vec<NodeReport>,
    pub stage_millis: StageMillis,
    pub step_millis: Vec<f64>,
    pub pool: PoolStats,
    pub cache: Option<CacheStats>,
    /// Rows that went through full model inference.
    pub inference_rows: u64,
    pub result_rows: usize,
    pub warnings: Vec<String>,
}

impl QueryReport {
    /// Line-oriented rendering with a fixed field order.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "query\t{}", self.query);
        for n in &self.nodes {
            let ms = self.step_millis.get(n.id).copied().unwrap_or(0.0);
            let _ = writeln!(
                s,
                "node\t{}\t{}\t{}\t{}\t{}\t{ms:.3}ms",
                n.id, n.kind, n.representation, n.est_bytes, n.out_shape
            );
        }
        let t = &self.stage_millis;
        let _ = writeln!(
            s,
            "stages\tparse={:.3}ms\tbind={:.3}ms\tplan={:.3}ms\texecute={:.3}ms",
            t.parse, t.bind, t.plan, t.execute
        );
        let p = &self.pool;
        let _ = writeln!(
            s,
            "pool\thits={}\tmisses={}\tevictions={}\tspills={}\tpeak_resident_bytes={}\tbudget_bytes={}",
            p.hits, p.misses, p.evictions, p.spills, p.peak_resident_bytes, p.budget_bytes
        );
        if let Some(c) = &self.cache {
            let _ = writeln!(
                s,
                "cache\thits={}\tmisses={}\tevictions={}\tentries={}\thit_rate={:.6}",
                c.hits, c.misses, c.evictions, c.entries, c.hit_rate
            );
        }
        let _ = writeln!(s, "rows\tinference={}\tresult={}", self.inference_rows, self.result_rows);
        for w in &self.warnings {
            let _ = writeln!(s, "warning\t{w}");
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct QueryResult {
    pub rows: RowRelation,
    pub report: QueryReport,
}

pub struct Engine {
    config: EngineConfig,
    catalog: Catalog,
    ctx: ExecContext,
    caches: Mutex<BTreeMap<String, Arc<InferenceCache>>>,
    _lock: Option<SpillLock>,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let (pool, lock) = match &config.spill_dir {
            Some(dir) => {
                let lock = SpillLock::acquire(dir)?;
                (BufferPool::new(config.buffer_pool_bytes, dir)?, Some(lock))
            }
            None => (BufferPool::temporary(config.buffer_pool_bytes)?, None),
        };
        let ctx = ExecContext::new(Arc::new(pool), config.workers, config.dense_cap_bytes)?;
        Ok(Engine {
            config,
            catalog: Catalog::new(),
            ctx,
            caches: Mutex::new(BTreeMap::new()),
            _lock: lock,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn context(&self) -> &ExecContext {
        &self.ctx
    }

    /// Loads a CSV file as table `name` and returns its row count.
    pub fn ingest_csv(&self, name: &str, path: &Path, opts: &IngestOptions) -> Result<usize> {
        self.catalog.table(name).err().ok_or_else(|| Error::invalid(format!("table `{name}` already exists")))?;
        let table = ingest_csv(self.ctx.pool(), path, opts)?;
        let rows = table.row_count();
        self.catalog.register_table(name, table)?;
        Ok(rows)
    }

    /// Stores an in-memory relation as table `name`.
    pub fn create_table(&self, name: &str, rows: &RowRelation) -> Result<()> {
        self.catalog.create_table(self.ctx.pool(), name, rows)
    }

    pub fn create_model(&self, name: &str, metadata: &str) -> Result<Arc<Model>> {
        self.catalog.create_model(name, metadata)
    }

    pub fn load_model(&self, name: &str, manifest: &Path) -> Result<Arc<Model>> {
        self.catalog.load_model(name, manifest)
    }

    pub fn register_model(&self, model: Model) -> Result<Arc<Model>> {
        self.catalog.insert_loaded(model)
    }

    /// The cache serving `model`, created on first use. `None` when
    /// caching is off.
    pub fn cache(&self, model: &str) -> Option<Arc<InferenceCache>> {
        if self.config.cache.mode == CacheMode::Off {
            return None;
        }
        let mut caches = self.caches.lock();
        let cache = caches.entry(model.to_string()).or_insert_with(|| {
            Arc::new(InferenceCache::new(self.config.cache).expect("cache config was validated"))
        });
        Some(Arc::clone(cache))
    }

    fn plan_with_timings(
        &self,
        sql: &str,
        optimizer: &OptimizerConfig,
        t: &mut StageMillis,
    ) -> Result<(ExecPlan, Option<String>), QueryError> {
        let start = Instant::now();
        let query = parse_query(sql).map_err(|e| QueryError::new(Phase::Parse, e))?;
        t.parse = ms(start);

        let start = Instant::now();
        let bound = bind(&query, &self.catalog).map_err(|e| QueryError::new(Phase::Bind, e))?;
        t.bind = ms(start);

        let start = Instant::now();
        let model = bound.model.as_ref().map(|m| m.name.clone());
        let plan = build_ir(&bound).map_err(|e| QueryError::new(Phase::Plan, e))?;
        let plan = optimize(&plan, optimizer);
        let opts = LowerOptions {
            block: self.config.block,
            cache: model.is_some() && self.config.cache.mode != CacheMode::Off,
        };
        let exec = lower_plan(&plan, opts).map_err(|e| QueryError::new(Phase::Plan, e))?;
        t.plan = ms(start);
        Ok((exec, model))
    }

    /// Lowered plan of `sql` without running it.
    pub fn plan(&self, sql: &str) -> Result<ExecPlan, QueryError> {
        self.plan_with(sql, &self.config.optimizer())
    }

    /// Lowered plan under explicit optimizer settings.
    pub fn plan_with(&self, sql: &str, optimizer: &OptimizerConfig) -> Result<ExecPlan, QueryError> {
        Ok(self.plan_with_timings(sql, optimizer, &mut StageMillis::default())?.0)
    }

    /// EXPLAIN text: one tab-separated line per executable step.
    pub fn explain(&self, sql: &str) -> Result<String, QueryError> {
        Ok(self.plan(sql)?.explain())
    }

    pub fn run_query(&self, sql: &str) -> Result<QueryResult, QueryError> {
        self.run_query_with(sql, &self.config.optimizer())
    }

    /// Runs `sql` with optimizer settings other than the engine's own.
    pub fn run_query_with(&self, sql: &str, optimizer: &OptimizerConfig) -> Result<QueryResult, QueryError> {
        let mut stages = StageMillis::default();
        let (plan, model) = self.plan_with_timings(sql, optimizer, &mut stages)?;
        if let Some(m) = &model {
            let loaded = self.catalog.model(m).map(|m| m.has_weights()).unwrap_or(false);
            if !loaded {
                return Err(QueryError::new(
                    Phase::Bind,
                    Error::Bind(format!("model `{m}` has no weights loaded")),
                ));
            }
        }
        let cache = model.as_deref().and_then(|m| self.cache(m));
        if let Some(c) = &cache {
            c.reset_stats();
        }
        self.ctx.pool().reset_stats();

        let start = Instant::now();
        let out = execute(&plan, &self.catalog, &self.ctx, cache.as_deref()).map_err(|e| QueryError::new(Phase::Execute, e))?;
        stages.execute = ms(start);

        let report = QueryReport {
            query: sql.trim().to_string(),
            nodes: plan.explain_lines().into_iter().map(NodeReport::from).collect(),
            stage_millis: stages,
            step_millis: out.step_millis,
            pool: self.ctx.pool().stats(),
            cache: cache.map(|c| c.stats()),
            inference_rows: out.inference_rows,
            result_rows: out.result.len(),
            warnings: self.config.warnings(),
        };
        Ok(QueryResult { rows: out.result, report })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_must_hold_three_blocks() {
        let cfg = EngineConfig {
            buffer_pool_bytes: 3 * 8 * 100 - 1,
            block: BlockSize::new(10, 10),
            ..EngineConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))));
        assert!(EngineConfig { buffer_pool_bytes: 2400, ..cfg }.validate().is_ok());
    }

    #[test]
    fn second_engine_on_same_spill_dir_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EngineConfig {
            spill_dir: Some(dir.path().to_path_buf()),
            buffer_pool_bytes: 64 << 20,
            ..EngineConfig::default()
        };
        let first = Engine::new(cfg.clone()).unwrap();
        assert!(Engine::new(cfg.clone()).is_err());
        drop(first);
        assert!(Engine::new(cfg).is_ok());
    }

    #[test]
    fn cache_disables_pushdown() {
        let mut cfg = EngineConfig::default();
        assert!(cfg.optimizer().pushdown_enabled);
        cfg.cache.mode = CacheMode::Exact;
        assert!(!cfg.optimizer().pushdown_enabled);
    }

    #[test]
    fn errors_carry_phase() {
        let engine = Engine::new(EngineConfig {
            buffer_pool_bytes: 64 << 20,
            ..EngineConfig::default()
        })
        .unwrap();
        assert_eq!(engine.run_query("SELECT FROM").unwrap_err().phase, Phase::Parse);
        assert_eq!(engine.run_query("SELECT count(*) FROM missing").unwrap_err().phase, Phase::Bind);
    }
}
