//! Execution mode for the data-parallel inner loops.
//!
//! Every batch operation in the crate (kNN scans, per-pair metric scoring,
//! mock embedding, per-question pipeline stages) maps over a slice through
//! [`Execution::map`]. Results always come back in input order, so switching
//! modes never changes an output.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Sequential,
    /// Uses the rayon global pool (or the pool installed by the caller).
    /// Without the `parallel` feature this behaves like `Sequential`.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Applies `f` to every item, preserving order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Like [`map`](Self::map) but for fallible closures; the first error in
    /// input order is returned.
    pub fn try_map<T, R, E, F>(self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(&T) -> Result<R, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }

    /// Runs `op` with at most `threads` workers. Sequential mode (or a build
    /// without rayon) just calls `op`.
    pub fn with_threads<R: Send>(self, threads: usize, op: impl FnOnce() -> R + Send) -> R {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            match rayon::ThreadPoolBuilder::new()
                .num_threads(threads.max(1))
                .build()
            {
                Ok(pool) => return pool.install(op),
                Err(e) => log::warn!("falling back to the global pool: {e}"),
            }
        }
        let _ = threads;
        op()
    }
}
