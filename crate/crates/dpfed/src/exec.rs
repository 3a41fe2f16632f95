use dpfed_core::fedtrain::Executor;
use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};

use crate::error::{DpfedError, Result};

/// Runs user updates on a rayon pool. Results come back in index order,
/// so output does not depend on the thread count.
pub struct RayonExecutor {
    pool: ThreadPool,
}

impl RayonExecutor {
    /// `threads = None` uses rayon's default (one per CPU).
    pub fn new(threads: Option<usize>) -> Result<Self> {
        let mut b = ThreadPoolBuilder::new();
        if let Some(n) = threads {
            b = b.num_threads(n);
        }
        let pool = b
            .build()
            .map_err(|e| DpfedError::config(format!("thread pool: {e}")))?;
        Ok(RayonExecutor { pool })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for RayonExecutor {
    fn map<T, F>(&self, n: usize, job: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.pool.install(|| (0..n).into_par_iter().map(job).collect())
    }
}
