//! Kernel-internal parallelism bounded by `MMUNET_THREADS` (default 1).
//!
//! Work is split only over independent output blocks, so results do not
//! depend on the thread count.

use std::sync::OnceLock;

use rayon::prelude::*;

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

pub fn thread_count() -> usize {
    std::env::var("MMUNET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn pool() -> Option<&'static rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let n = thread_count();
        (n > 1)
            .then(|| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok())
            .flatten()
    })
    .as_ref()
}

/// Calls `f(i, chunk_i)` for consecutive `chunk`-sized blocks of `out`.
pub(crate) fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 || out.is_empty() {
        return;
    }
    match pool() {
        Some(pool) if out.len() > chunk => {
            pool.install(|| out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)))
        }
        _ => out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
    }
}
