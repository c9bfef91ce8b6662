//! Deterministic parallel sweeps: tasks are identified by index, workers are
//! capped by the `DRNM_THREADS` environment variable, and results are
//! returned in index order regardless of scheduling.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const THREADS_ENV: &str = "DRNM_THREADS";

/// Worker cap: `DRNM_THREADS` when set, otherwise the machine parallelism.
pub fn thread_cap() -> Result<usize, String> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}")),
        Err(_) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
    }
}

/// Run `f` for every index in 0..n on up to `workers` threads and collect
/// the results in index order.
pub fn parallel_map_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if n == 0 {
        return Vec::new();
    }
    if workers == 1 {
        return (0..n).map(f).collect();
    }

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let value = f(i);
                slots.lock().expect("result buffer poisoned")[i] = Some(value);
            });
        }
    });

    slots
        .into_inner()
        .expect("result buffer poisoned")
        .into_iter()
        .map(|s| s.expect("every index computed"))
        .collect()
}
