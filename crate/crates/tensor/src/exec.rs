//! Batch-level data parallelism with a sequential fallback.
//!
//! Results always come back in input order, so reductions performed by the
//! caller are independent of the execution mode.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is enabled; otherwise
    /// identical to `Sequential`.
    #[default]
    Parallel,
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<R, F>(mode: Parallelism, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, returning results in slice order.
pub fn map_slice<T, R, F>(mode: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_indexed(mode, items.len(), |i| f(&items[i]))
}

/// Like [`map_indexed`] for fallible work; the first error in index order wins.
pub fn try_map_indexed<R, E, F>(mode: Parallelism, n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    map_indexed(mode, n, f).into_iter().collect()
}
