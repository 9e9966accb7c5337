//! Data-parallel maps with a sequential fallback.
//!
//! With the `parallel` feature (on by default) maps run on the rayon pool
//! unless the process-wide mode is set to [`ExecMode::Sequential`]. Without
//! the feature every map runs in order on the calling thread. Results are
//! always returned in input order, so any reduction over them is
//! deterministic regardless of mode or thread count.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

pub fn set_mode(mode: ExecMode) {
    MODE.store(mode as u8, Ordering::Relaxed);
}

pub fn mode() -> ExecMode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == ExecMode::Parallel as u8 {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

/// `f(0), f(1), …, f(n-1)` collected in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == ExecMode::Parallel && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_range(items.len(), |i| f(&items[i]))
}

/// Like [`map_range`] but stops at the first error in index order.
pub fn try_map_range<R, E, F>(n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    map_range(n, f).into_iter().collect()
}
