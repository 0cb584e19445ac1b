//! Task execution strategy.
//!
//! Work that is independent per item (examples in a batch, tiles in a group)
//! goes through an `Executor`. Results always come back in index order, so
//! any reduction over them is independent of the execution order.

use alloc::vec::Vec;

pub trait Executor {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send;
}

/// Runs items one after another on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

/// Runs items in a fixed permuted order (for order-independence tests).
#[derive(Clone, Debug, Default)]
pub struct Permuted {
    pub seed: u64,
}

impl Executor for Permuted {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        let stream = crate::rng::SeededStream::new(self.seed);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = (stream.u64_at(i as u64) % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
        for i in order {
            out[i] = Some(f(i));
        }
        out.into_iter().map(|r| r.expect("every index visited")).collect()
    }
}
