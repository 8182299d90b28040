//! Thread-pool sizing shared by trace-, image- and file-level parallel loops.

use std::sync::OnceLock;

use rayon::ThreadPool;

pub const THREADS_ENV: &str = "GPRFORGE_THREADS";

/// Worker count: `GPRFORGE_THREADS` when set to a positive integer, otherwise
/// the number of available cores.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Process-wide pool. Every parallel loop in the crate writes results by
/// index, so outputs do not depend on the worker count.
pub fn pool() -> &'static ThreadPool {
    static POOL: OnceLock<ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count())
            .build()
            .expect("failed to build thread pool")
    })
}
