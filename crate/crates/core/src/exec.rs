//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (on by default) work is spread over the rayon
//! pool; without it the same calls run sequentially. Each item is computed
//! independently and results are collected in index order, so both back ends
//! produce bit-identical output.

/// Below this much work a parallel split costs more than it saves.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Sequential back end. Always available, used by benches for comparison.
pub mod sequential {
    pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).map(f).collect()
    }

    pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        data.chunks_mut(chunk.max(1))
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

/// Rayon back end.
#[cfg(feature = "parallel")]
pub mod parallel {
    use rayon::prelude::*;

    pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }

    pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        data.par_chunks_mut(chunk.max(1))
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

#[cfg(feature = "parallel")]
use parallel as backend;
#[cfg(not(feature = "parallel"))]
use sequential as backend;

/// Whether this build dispatches to rayon.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// `(0..n).map(f).collect()`, in parallel when enabled.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    backend::map_indices(n, f)
}

/// Applies `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `data`.
/// `work` is a rough operation count; small jobs stay on the calling thread.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if work < MIN_PARALLEL_WORK {
        sequential::for_each_chunk_mut(data, chunk, f)
    } else {
        backend::for_each_chunk_mut(data, chunk, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backends_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let seq = sequential::map_indices(1000, f);
        let dispatched = map_indices(1000, f);
        assert_eq!(seq, dispatched);
    }

    #[test]
    fn chunks_visit_every_element_once() {
        let mut v = vec![0usize; 103];
        for_each_chunk_mut(&mut v, 10, usize::MAX, |ci, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x += ci * 10 + j;
            }
        });
        assert!(v.iter().enumerate().all(|(i, &x)| x == i));
    }
}
