// SPDX-License-Identifier: Apache-2.0

//! Execution policy for the data-parallel loops (ensemble paths, KL repeats).
//!
//! Every parallel loop here is an ordered map over an index range: results are
//! collected by index and reduced sequentially, so output never depends on the
//! number of worker threads. Without the `parallel` feature, `Parallel` runs
//! the same code sequentially.

/// How data-parallel loops are executed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True when this build can actually run loops on a thread pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f` over `0..len`, returning results in index order.
pub fn map_indexed<T, F>(exec: Execution, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if exec.is_parallel() {
            use rayon::prelude::*;
            return (0..len).into_par_iter().map(f).collect();
        }
    }
    let _ = exec;
    (0..len).map(f).collect()
}

/// Applies `f` to consecutive `chunk`-sized pieces of `data`, passing the chunk index.
pub fn for_each_chunk_mut<T, F>(exec: Execution, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if exec.is_parallel() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = exec;
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Number of worker threads loops will use under `exec`.
pub fn worker_count(exec: Execution) -> usize {
    #[cfg(feature = "parallel")]
    {
        if exec.is_parallel() {
            return rayon::current_num_threads();
        }
    }
    let _ = exec;
    1
}

/// Runs `f` with data-parallel loops capped at `threads` workers.
///
/// `None` keeps the global pool. A cap of one worker, or a build without the
/// `parallel` feature, runs `f` directly with `Execution::Sequential`.
pub fn with_threads<R, F>(threads: Option<usize>, f: F) -> crate::Result<R>
where
    R: Send,
    F: FnOnce(Execution) -> R + Send,
{
    match threads {
        Some(0) => crate::error::invalid("thread count must be positive"),
        Some(1) => Ok(f(Execution::Sequential)),
        #[cfg(feature = "parallel")]
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| crate::Error::InvalidArgument(format!("thread pool: {e}")))?;
            Ok(pool.install(|| f(Execution::Parallel)))
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => Ok(f(Execution::Sequential)),
        None => Ok(f(Execution::default())),
    }
}
