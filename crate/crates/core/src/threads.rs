//! Thread-count control.
//!
//! Kernels parallelize with rayon over independent units (batch samples, slices)
//! and always reduce in a fixed order, so results do not depend on the pool size.

use rayon::ThreadPoolBuilder;

/// Environment variable capping internal parallelism. `0` or unset means one thread.
pub const THREADS_ENV: &str = "AORTASEG_THREADS";

/// Thread count requested through [`THREADS_ENV`].
pub fn configured_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs `f` inside a dedicated rayon pool with `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    let pool = ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("failed to build thread pool");
    pool.install(f)
}
