//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) independent per-item work is fanned
//! out over rayon's pool once the estimated amount of work is large enough to
//! pay for the scheduling. Without it every helper degrades to a plain
//! sequential loop. Results are always collected in index order, so callers
//! that reduce them in a fixed order get bit-identical output either way.

/// Below this many estimated flops per call the work stays on the calling
/// thread.
pub const PARALLEL_WORK_THRESHOLD: usize = 1 << 16;

/// Evaluates `f(0), .., f(len - 1)` and returns the results in index order.
pub fn map_indexed<T, F>(len: usize, work_hint: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if len > 1 && work_hint >= PARALLEL_WORK_THRESHOLD {
            use rayon::prelude::*;
            return (0..len).into_par_iter().map(f).collect();
        }
    }
    let _ = work_hint;
    (0..len).map(f).collect()
}

/// Fallible variant of [`map_indexed`]; the first error in index order wins.
pub fn try_map_indexed<T, E, F>(len: usize, work_hint: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(len, work_hint, f).into_iter().collect()
}

/// True when this build fans work out to a thread pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
