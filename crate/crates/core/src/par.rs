//! Optional data parallelism.
//!
//! Every batch workload in the crate (finite-difference gradients, Hessians,
//! order-selection grids, seed sweeps) goes through [`map_indexed`]. With the
//! `parallel` feature the work is spread over the rayon pool; without it, or
//! with [`Parallelism::Sequential`], the same closure runs in a plain loop and
//! produces identical results in identical order.

/// How a batch of independent evaluations is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is enabled, otherwise
    /// falls back to sequential execution.
    #[default]
    Parallel,
}

impl Parallelism {
    /// True when work will actually be dispatched to worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Evaluates `f(workspace, i)` for `i in 0..len`, creating one workspace per
/// worker with `init`. Output order always matches the index order.
pub fn map_indexed<W, R, I, F>(len: usize, mode: Parallelism, init: I, f: F) -> Vec<R>
where
    R: Send,
    I: Fn() -> W + Sync + Send,
    F: Fn(&mut W, usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if mode == Parallelism::Parallel && len > 1 {
            use rayon::prelude::*;
            return (0..len).into_par_iter().map_init(&init, |ws, i| f(ws, i)).collect();
        }
    }
    let _ = mode;
    let mut ws = init();
    (0..len).map(|i| f(&mut ws, i)).collect()
}

/// Configures the global rayon pool size. Returns `false` if the pool was
/// already initialised or parallelism is compiled out.
pub fn set_global_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}
