//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) batch-level loops fan out over the
//! rayon pool; without it, or with [`Execution::Sequential`], the same
//! closures run in order on the calling thread. Every helper writes each
//! output slot from exactly one task, so results are bit-identical across
//! modes.

use std::sync::atomic::{AtomicU8, Ordering};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

static GLOBAL: AtomicU8 = AtomicU8::new(1);

/// Mode used by the tensor kernels, which have no per-call knob.
pub fn global() -> Execution {
    match GLOBAL.load(Ordering::Relaxed) {
        0 => Execution::Sequential,
        _ => Execution::Parallel,
    }
}

pub fn set_global(exec: Execution) {
    GLOBAL.store(
        match exec {
            Execution::Sequential => 0,
            Execution::Parallel => 1,
        },
        Ordering::Relaxed,
    );
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// `(0..n).map(f)` with results in index order.
pub fn map_indexed<T, F>(n: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Calls `f(chunk_index, chunk)` for consecutive chunks of `chunk` elements.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, exec: Execution, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && data.len() > chunk {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Number of rows per task so that each task gets at least `min_work` elements.
pub(crate) fn rows_per_task(rows: usize, row_len: usize, min_work: usize) -> usize {
    let threads = thread_count();
    let by_threads = rows.div_ceil(threads.max(1));
    let by_work = min_work.div_ceil(row_len.max(1));
    by_threads.max(by_work).max(1)
}

pub fn thread_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let f = |i: usize| (i as f64).sqrt();
        assert_eq!(
            map_indexed(100, Execution::Sequential, f),
            map_indexed(100, Execution::Parallel, f)
        );
        let mut a = vec![0usize; 1000];
        let mut b = vec![0usize; 1000];
        for_each_chunk_mut(&mut a, 7, Execution::Sequential, |i, c| {
            c.iter_mut().for_each(|x| *x = i)
        });
        for_each_chunk_mut(&mut b, 7, Execution::Parallel, |i, c| {
            c.iter_mut().for_each(|x| *x = i)
        });
        assert_eq!(a, b);
    }
}
