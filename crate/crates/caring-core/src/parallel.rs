//! Execution-mode plumbing for the data-parallel inner loops.
//!
//! Hot loops (trajectory generation, batched evaluation, point sweeps) are
//! written once against these helpers. With the `parallel` feature (default)
//! `Exec::Auto` dispatches to rayon; without it, everything runs
//! sequentially. Work is always split over independent output slots with a
//! fixed per-slot reduction order, so sequential and parallel execution are
//! bit-identical — asserted by tests and compared by the criterion benches.

/// How a data-parallel loop should execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    /// Use the rayon thread pool when the `parallel` feature is enabled.
    #[default]
    Auto,
    /// Force single-threaded execution.
    Sequential,
}

/// Map `0..n` through `f`, collecting results in index order.
pub fn map_collect<U, F>(exec: Exec, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        Exec::Auto => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}

/// Run `f(i, chunk_i)` over consecutive `chunk` slices of `out`.
pub fn for_each_chunk<T, F>(exec: Exec, out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0 && out.len() % chunk == 0);
    match exec {
        Exec::Sequential => {
            for (i, slice) in out.chunks_mut(chunk).enumerate() {
                f(i, slice);
            }
        }
        Exec::Auto => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                out.par_chunks_mut(chunk).enumerate().for_each(|(i, s)| f(i, s));
            }
            #[cfg(not(feature = "parallel"))]
            {
                for (i, slice) in out.chunks_mut(chunk).enumerate() {
                    f(i, slice);
                }
            }
        }
    }
}
