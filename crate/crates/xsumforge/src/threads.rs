//! Worker-pool sizing for the parallel corpus and evaluation passes.
//!
//! `XSUMFORGE_THREADS` caps the pool; unset or `0` means one worker per
//! available core. Parallel sections always reduce in input order, so thread
//! count never changes results.

use std::sync::OnceLock;

use rayon::ThreadPool;

pub const THREADS_ENV: &str = "XSUMFORGE_THREADS";

static POOL: OnceLock<ThreadPool> = OnceLock::new();

/// The process-wide worker pool honoring `XSUMFORGE_THREADS`.
pub fn pool() -> &'static ThreadPool {
    POOL.get_or_init(|| {
        let threads = configured_threads();
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("worker pool construction cannot fail with a sane thread count")
    })
}

fn configured_threads() -> usize {
    match std::env::var(THREADS_ENV) {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) => n,
            Err(_) => {
                log::warn!("ignoring invalid {THREADS_ENV}={raw:?}; using all cores");
                0
            }
        },
        Err(_) => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_runs_closures() {
        let total: i64 = pool().install(|| {
            use rayon::prelude::*;
            (0..100i64).into_par_iter().sum()
        });
        assert_eq!(total, 4950);
    }
}
