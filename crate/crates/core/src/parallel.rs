//! Worker-thread fan-out for independent jobs.

use std::thread;

/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "CONVMAE_THREADS";

/// Worker count from [`THREADS_ENV`], else the machine's parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f(0..n)` across worker threads. Results come back in index order, so
/// the output does not depend on the worker count.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let workers = thread_count().min(n.max(1));
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    thread::scope(|s| {
        for (w, chunk) in slots.chunks_mut(n.div_ceil(workers)).enumerate() {
            let f = &f;
            let base = w * n.div_ceil(workers);
            s.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(base + i));
                }
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_keep_index_order() {
        let out = map_indexed(37, |i| i * i);
        assert_eq!(out, (0..37).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn empty_input_gives_empty_output() {
        assert!(map_indexed(0, |i| i).is_empty());
    }
}
