//! Thread-pool executor. Output order equals input order, so results are
//! bit-identical to [`tqvsr_core::Sequential`] for any worker count.

use rayon::prelude::*;
use tqvsr_core::Executor;

pub const THREADS_ENV: &str = "TQVSR_THREADS";

pub struct Parallel {
    pool: rayon::ThreadPool,
}

impl Parallel {
    pub fn new(threads: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build().expect("thread pool");
        Self { pool }
    }

    /// Available parallelism, capped by `TQVSR_THREADS` when it parses as a positive integer.
    pub fn from_env() -> Self {
        Self::new(threads_from(std::env::var(THREADS_ENV).ok().as_deref()))
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

fn threads_from(var: Option<&str>) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match var.and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(cap) if cap > 0 => cap.min(available),
        _ => available,
    }
}

impl Executor for Parallel {
    fn map<I, O, F>(&self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(&I) -> O + Sync + Send,
    {
        if self.threads() == 1 {
            return items.iter().map(f).collect();
        }
        self.pool.install(|| items.par_iter().map(f).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tqvsr_core::Sequential;

    #[test]
    fn env_caps_but_never_zeroes() {
        assert_eq!(threads_from(Some("1")), 1);
        assert!(threads_from(Some("0")) >= 1);
        assert!(threads_from(Some("lots")) >= 1);
        assert!(threads_from(Some("100000")) <= threads_from(None));
    }

    #[test]
    fn preserves_order() {
        let items: Vec<u64> = (0..1000).collect();
        let f = |x: &u64| (*x as f64).sqrt().to_bits();
        assert_eq!(Parallel::new(4).map(&items, f), Sequential.map(&items, f));
    }
}
