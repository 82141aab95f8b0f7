//! Execution policy for the data-parallel inner loops.
//!
//! Every loop routed through here computes rows independently, so the
//! parallel and sequential paths produce bit-identical results. Without the
//! `parallel` feature, [`ExecPolicy::Parallel`] quietly runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecPolicy {
    Sequential,
    Parallel,
}

impl Default for ExecPolicy {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecPolicy::Parallel
        } else {
            ExecPolicy::Sequential
        }
    }
}

/// Calls `f(row_index, row)` for every `width`-wide row of `data`.
pub(crate) fn for_each_row<F>(policy: ExecPolicy, data: &mut [f32], width: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Send + Sync,
{
    if width == 0 {
        return;
    }
    match policy {
        #[cfg(feature = "parallel")]
        ExecPolicy::Parallel => data
            .par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row)),
        _ => data
            .chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row)),
    }
}

/// Collects `f(i)` for `i in 0..n`, preserving index order.
pub(crate) fn map_range<T, F>(policy: ExecPolicy, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    match policy {
        #[cfg(feature = "parallel")]
        ExecPolicy::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}
