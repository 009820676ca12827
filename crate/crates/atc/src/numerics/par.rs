//! Fixed-chunk work splitting.
//!
//! The same chunk boundaries are used whether or not the `parallel` feature
//! is enabled, and partial results are always combined in chunk order, so
//! results are bit-identical across builds and thread counts.

/// Images per work chunk for batched image ops (conv, augment, render).
pub const IMAGE_CHUNK: usize = 32;

#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T: Send, F>(data: &mut [T], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Map chunk indices to partial results, preserving chunk order.
#[cfg(feature = "parallel")]
pub fn map_chunks<R: Send, F>(n_chunks: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n_chunks).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_chunks<R, F>(n_chunks: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n_chunks).map(f).collect()
}
