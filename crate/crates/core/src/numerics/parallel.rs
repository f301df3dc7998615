//! Kernel-level parallelism over batch elements.
//!
//! The worker count comes from `PMSS_THREADS` (default 1) unless overridden
//! with [`set_threads`]. Work is split on batch boundaries only, so results
//! do not depend on the worker count.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(0);

pub fn threads() -> usize {
    match THREADS.load(Ordering::Relaxed) {
        0 => {
            let n = std::env::var("PMSS_THREADS")
                .ok()
                .and_then(|v| v.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .unwrap_or(1);
            THREADS.store(n, Ordering::Relaxed);
            n
        }
        n => n,
    }
}

pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

/// Calls `f(i, chunk)` for each `chunk_len`-sized chunk of `buf`.
pub fn for_each_chunk<F>(buf: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let count = buf.len() / chunk_len;
    let workers = threads().min(count);
    if workers <= 1 {
        for (i, chunk) in buf.chunks_mut(chunk_len).enumerate() {
            f(i, chunk);
        }
        return;
    }
    let per = count.div_ceil(workers);
    std::thread::scope(|s| {
        for (w, block) in buf.chunks_mut(per * chunk_len).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (j, chunk) in block.chunks_mut(chunk_len).enumerate() {
                    f(w * per + j, chunk);
                }
            });
        }
    });
}
