//! Process-level tuning shared by the training and profiling entry points.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

/// Environment variable that caps the number of compute threads.
pub const THREADS_ENV: &str = "DUALFER_THREADS";

/// Threads the convolution kernels split a batch across: `DUALFER_THREADS`
/// when set to a positive integer, otherwise the available cores. Read once.
pub fn compute_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
    })
}

/// Runs `f` on every task, spreading tasks round-robin over up to
/// [`compute_threads`] scoped threads. Callers make each task's result
/// independent of which thread runs it, so outputs do not depend on the
/// thread count.
pub fn parallel_tasks<T: Send>(tasks: Vec<T>, f: impl Fn(T) + Sync) {
    let threads = compute_threads().min(tasks.len());
    if threads <= 1 {
        tasks.into_iter().for_each(f);
        return;
    }
    let mut buckets: Vec<Vec<T>> = (0..threads).map(|_| Vec::new()).collect();
    for (i, t) in tasks.into_iter().enumerate() {
        buckets[i % threads].push(t);
    }
    let f = &f;
    std::thread::scope(|s| {
        let mut buckets = buckets.into_iter();
        let first = buckets.next().expect("at least two buckets");
        for bucket in buckets {
            s.spawn(move || bucket.into_iter().for_each(f));
        }
        first.into_iter().for_each(f);
    });
}

/// Keeps freed activation buffers inside the allocator instead of returning
/// them to the OS after every op. Training allocates and frees tens of
/// megabytes per layer; without this each buffer is re-faulted page by page.
/// Idempotent; a no-op outside glibc.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        // glibc caps the mmap threshold at 32 MiB on 64-bit targets.
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

/// Host description attached to timing reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub host: String,
    pub os: String,
    pub arch: String,
    pub available_cores: usize,
    /// Threads the convolution kernels use; see [`compute_threads`].
    pub compute_threads: usize,
    pub precision: String,
}

impl Environment {
    pub fn detect() -> Self {
        let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        let host = std::fs::read_to_string("/etc/hostname")
            .ok()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .or_else(|| std::env::var("HOSTNAME").ok())
            .unwrap_or_else(|| "unknown".into());
        Self {
            host,
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            available_cores: cores,
            compute_threads: compute_threads(),
            precision: "f32".into(),
        }
    }
}

/// Seed for an independent random stream identified by `parts`
/// (for example `[stream_tag, epoch, sample_index]`). SplitMix64 mixing, so
/// nearby inputs give unrelated seeds and results never depend on how work
/// is scheduled.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_tasks_visits_every_task_once() {
        let mut out = vec![0usize; 37];
        parallel_tasks(out.chunks_mut(5).enumerate().collect(), |(i, chunk)| {
            chunk.iter_mut().for_each(|v| *v += i + 1);
        });
        for (j, v) in out.iter().enumerate() {
            assert_eq!(*v, j / 5 + 1);
        }
    }

    #[test]
    fn derived_seeds_depend_on_every_part() {
        let a = derive_seed(1, &[2, 3]);
        assert_eq!(a, derive_seed(1, &[2, 3]));
        assert_ne!(a, derive_seed(1, &[3, 2]));
        assert_ne!(a, derive_seed(2, &[2, 3]));
        assert_ne!(derive_seed(1, &[]), derive_seed(1, &[0]));
    }
}
