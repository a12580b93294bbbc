//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they fall back to plain sequential iterators. Every helper preserves input
//! order in its output, so results do not depend on the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, keeping order.
#[cfg(feature = "parallel")]
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n`, keeping order.
#[cfg(feature = "parallel")]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Filter-map over `items`, keeping the order of retained elements.
#[cfg(feature = "parallel")]
pub fn filter_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Option<U> + Sync + Send,
{
    items.par_iter().filter_map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn filter_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> Option<U>,
{
    items.iter().filter_map(f).collect()
}

/// Runs `f` on a dedicated pool with `threads` workers. `None` uses the
/// global pool. Without the `parallel` feature this simply calls `f`.
#[cfg(feature = "parallel")]
pub fn with_threads<R, F>(threads: Option<usize>, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
        {
            Ok(pool) => pool.install(f),
            Err(e) => {
                log::warn!("could not build a {n}-thread pool ({e}); using the global pool");
                f()
            }
        },
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<R, F>(_threads: Option<usize>, f: F) -> R
where
    F: FnOnce() -> R,
{
    f()
}

/// Number of worker threads the helpers will use in the current context.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
