//! Thread-pool executor.

use hfd_core::exec::Executor;
use rayon::prelude::*;

/// Runs items on the global rayon pool; results stay in index order.
#[derive(Clone, Copy, Debug, Default)]
pub struct Rayon;

impl Executor for Rayon {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }
}
