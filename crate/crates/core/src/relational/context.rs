use std::sync::Arc;

use super::buffer_pool::BufferPool;
use super::memory::MemoryGovernor;
use crate::error::{Error, Result};

/// Everything an operator needs at run time: the buffer pool, the worker
/// pool and the dense allocation cap.
pub struct ExecContext {
    pool: Arc<BufferPool>,
    threads: rayon::ThreadPool,
    workers: usize,
    memory: MemoryGovernor,
}

impl std::fmt::Debug for ExecContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExecContext")
            .field("pool", &self.pool)
            .field("workers", &self.workers)
            .field("dense_cap", &self.memory.cap())
            .finish()
    }
}

impl ExecContext {
    pub fn new(pool: Arc<BufferPool>, workers: usize, dense_cap: Option<u64>) -> Result<Self> {
        if workers == 0 {
            return Err(Error::invalid("worker count must be at least 1"));
        }
        let threads = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("relinfer-worker-{i}"))
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
        Ok(ExecContext {
            pool,
            threads,
            workers,
            memory: MemoryGovernor::new(dense_cap),
        })
    }

    /// Single-worker context over a temporary, effectively unbounded pool.
    pub fn unbounded() -> Result<Self> {
        Self::new(Arc::new(BufferPool::temporary(u64::MAX)?), 1, None)
    }

    pub fn pool(&self) -> &Arc<BufferPool> {
        &self.pool
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn memory(&self) -> &MemoryGovernor {
        &self.memory
    }

    /// Runs `f` with this context's worker pool as the current rayon pool.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.threads.install(f)
    }
}
