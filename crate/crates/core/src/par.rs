//! Data-parallel helpers.
//!
//! Every batch-shaped loop in the crate (per-example gradients, corpus
//! generation, decode streams, metric evaluation) goes through [`map`]. With
//! the `parallel` feature the work fans out over the rayon pool; without it,
//! or when [`Parallelism::Sequential`] is requested, it runs in order on the
//! calling thread. Output order always matches input order, so reductions
//! over the results are deterministic either way.

/// Execution mode for batch loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    #[default]
    Parallel,
    Sequential,
}

impl Parallelism {
    /// True when work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], mode: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if mode == Parallelism::Parallel {
            use rayon::prelude::*;
            return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
        }
    }
    let _ = mode;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Number of worker threads a parallel map would use.
pub fn workers(mode: Parallelism) -> usize {
    #[cfg(feature = "parallel")]
    {
        if mode == Parallelism::Parallel {
            return rayon::current_num_threads();
        }
    }
    let _ = mode;
    1
}

/// Runs `f` with parallel maps limited to `n` threads.
pub fn with_workers<R: Send>(n: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            return pool.install(f);
        }
    }
    let _ = n;
    f()
}
