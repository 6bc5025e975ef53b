//! Data-parallel map with a sequential fallback.
//!
//! Results are always collected in input order, and reductions downstream
//! run serially over that order, so parallel and sequential execution
//! produce bitwise-identical results. `workers == 1` forces the sequential
//! path at runtime; building without the `parallel` feature removes rayon
//! entirely.

/// Maps `f` over `items`, preserving order.
pub fn par_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if workers != 1 {
            use rayon::prelude::*;
            return items.into_par_iter().map(f).collect();
        }
    }
    let _ = workers;
    items.into_iter().map(f).collect()
}

/// Maps `f` over indices `0..n`, preserving order.
pub fn par_map_range<R, F>(n: usize, workers: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    par_map((0..n).collect(), workers, f)
}
