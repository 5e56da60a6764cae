//! Data-parallel map over independent items, with a sequential fallback.
//!
//! Results come back in input order and all reductions downstream run in
//! that fixed order, so outputs are bit-identical for any thread count.
//! With the `parallel` feature disabled everything degrades to plain
//! iterators and rayon never enters the build.

/// Thread budget for a batch map. `Seq` is the deterministic default;
/// `Auto` hands sizing to rayon; `Fixed(n)` builds an n-thread pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threads {
    Seq,
    Auto,
    Fixed(usize),
}

impl Threads {
    /// Maps the `threads` config key: 0 means auto, 1 sequential.
    pub fn from_config(n: usize) -> Self {
        match n {
            0 => Threads::Auto,
            1 => Threads::Seq,
            n => Threads::Fixed(n),
        }
    }
}

/// Apply `f` to every item, preserving order.
pub fn map_items<T, U, F>(items: &[T], threads: Threads, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    map_indexed(items, threads, |_, item| f(item))
}

/// Apply `f(index, item)` to every item, preserving order.
pub fn map_indexed<T, U, F>(items: &[T], threads: Threads, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        match threads {
            Threads::Seq => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
            Threads::Auto => items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect(),
            Threads::Fixed(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .expect("failed to build worker pool");
                pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}
