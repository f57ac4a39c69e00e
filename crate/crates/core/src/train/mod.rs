//! Training and sampling harness behind the `dim` binary: configuration,
//! datasets, optimizer, checkpoints, image output and the worker pool.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod optim;
pub mod ppm;
pub mod run;
pub mod sample;

use crate::error::{DimError, Result};

pub const THREADS_ENV: &str = "DIM_THREADS";

/// Worker count from `DIM_THREADS` (default 1).
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(DimError::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
    }
}

/// Splits `items` into at most `threads` contiguous chunks, runs `f` on each
/// chunk concurrently and returns the results in chunk order.
pub fn map_chunks<I, R, F>(items: &[I], threads: usize, f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(usize, &[I]) -> R + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    let size = items.len().div_ceil(threads).max(1);
    if threads == 1 {
        return vec![f(0, items)];
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(size)
            .enumerate()
            .map(|(i, chunk)| {
                let f = &f;
                s.spawn(move || f(i * size, chunk))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    })
}
