//! Independent-job batches: oracle restarts, seeded runs, parameter sweeps.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How a batch of independent jobs is executed. Results are identical
/// in both modes; only scheduling differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchMode {
    /// Data-parallel over the rayon pool. Without the `parallel` feature
    /// this runs sequentially.
    #[default]
    Parallel,
    Sequential,
}

impl BatchMode {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == BatchMode::Parallel
    }
}

/// Maps `f` over `items`, preserving order.
pub fn batch_map<T, R, F>(mode: BatchMode, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return items.into_par_iter().map(f).collect();
    }
    let _ = mode;
    items.into_iter().map(f).collect()
}
