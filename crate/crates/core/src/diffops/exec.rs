//! Execution mode switch.
//!
//! Kernels split work into disjoint output planes; every plane is reduced in
//! the same fixed order no matter which thread runs it, so parallel and
//! sequential execution produce bitwise-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Minimum number of multiply-adds before a kernel fans out to the pool.
const PAR_THRESHOLD: usize = 1 << 16;

pub fn set_parallel(on: bool) {
    PARALLEL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    PARALLEL.load(Ordering::SeqCst)
}

/// Runs `f(index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub(crate) fn for_each_plane<T, F>(data: &mut [T], chunk: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if is_parallel() && work >= PAR_THRESHOLD && data.len() > chunk {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}
