//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature these fan out over rayon's pool; without it
//! they are plain loops. Callers must not depend on execution order: every
//! closure gets its own index and writes only its own slot.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Whether this build can run work on more than one thread.
pub const AVAILABLE: bool = cfg!(feature = "parallel");

/// `f(i, &mut items[i])` for every item.
pub fn for_each_mut<T, F>(items: &mut [T], parallel: bool, f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        items.par_iter_mut().enumerate().for_each(|(i, x)| f(i, x));
        return;
    }
    let _ = parallel;
    items.iter_mut().enumerate().for_each(|(i, x)| f(i, x));
}

/// `f(i, &mut items[i])` for every item, results collected in order.
pub fn map_mut<T, R, F>(items: &mut [T], parallel: bool, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return items.par_iter_mut().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let _ = parallel;
    items.iter_mut().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// `(0..n).map(f)`, collected in index order.
pub fn map_range<R, F>(n: usize, parallel: bool, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

/// `items.iter().map(f)`, collected in order.
pub fn map_slice<T, R, F>(items: &[T], parallel: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return items.par_iter().map(f).collect();
    }
    let _ = parallel;
    items.iter().map(f).collect()
}
