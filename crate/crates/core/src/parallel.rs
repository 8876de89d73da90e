//! Thread-pool policy.
//!
//! `PERCEPTLAB_THREADS` caps internal parallelism; unset or `0` means a single
//! worker. Every parallel section collects results in input order and reduces
//! sequentially, so outputs do not depend on the thread count.

use std::sync::OnceLock;

pub const THREADS_ENV: &str = "PERCEPTLAB_THREADS";

pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count())
            .build()
            .expect("failed to build worker pool")
    })
}

/// Runs `f` inside the process-wide worker pool.
pub fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    pool().install(f)
}
