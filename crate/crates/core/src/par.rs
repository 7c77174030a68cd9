//! Data-parallel helpers. With the `parallel` feature the work items run on
//! the rayon pool; without it they run in order on the calling thread.
//! Results are always returned in item order, so reductions over them are
//! independent of the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Items per work unit for batch-split kernels. Fixed so that partial sums
/// are grouped identically whatever the pool size.
pub const CHUNK: usize = 8;

/// Apply `f` to each mutable chunk of `out` along with the chunk index.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Map `0..n` through `f`, collecting results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
