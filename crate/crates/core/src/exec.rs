//! Index-ordered data-parallel helpers.
//!
//! With the `parallel` feature the closures fan out over the current rayon
//! pool; without it they run sequentially. Both paths return results in
//! index order, so downstream reductions (always sequential) see the same
//! operand order regardless of worker count.

#[cfg(feature = "parallel")]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}
