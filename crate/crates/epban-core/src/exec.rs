//! Data-parallel execution helpers.
//!
//! Heavy kernels (matmul, conv, attention slices, per-image evaluation)
//! run through these drivers. With the `parallel` feature enabled the work
//! is spread over rayon; without it, or after `set_parallel(false)`, the
//! same loops run sequentially. Every unit of work owns a disjoint output
//! slice and accumulates with a fixed inner order, so both modes produce
//! bitwise-identical results — the benches rely on that to compare them.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Runtime switch for the rayon path. No-op when the `parallel` feature
/// is compiled out.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Apply `f` to each contiguous `chunk`-sized slice of `out`.
/// `f(i, chunk)` receives the chunk index.
pub(crate) fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Collect `f(0..n)` preserving index order.
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_driver_matches_sequential() {
        let mut a = vec![0u64; 64];
        let mut b = vec![0u64; 64];
        let work = |i: usize, c: &mut [u64]| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 31 + j) as u64;
            }
        };
        set_parallel(true);
        for_each_chunk(&mut a, 8, work);
        set_parallel(false);
        for_each_chunk(&mut b, 8, work);
        set_parallel(true);
        assert_eq!(a, b);
    }
}
