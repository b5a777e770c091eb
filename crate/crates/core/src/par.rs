//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers fan work out over
//! rayon; without it they run the same closures sequentially. Every helper
//! writes each output slot from exactly one closure invocation, so results
//! are bitwise identical across thread counts — parallelism never
//! reassociates a floating-point reduction.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Run `f(i, chunk)` over consecutive `chunk_len` slices of `out`.
///
/// `out.len()` must be a multiple of `chunk_len`. Each chunk is written
/// independently; `i` is the chunk index.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk_len > 0 && out.len().is_multiple_of(chunk_len));
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
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

/// Map `f` over items, collecting results in input order.
pub fn map_slice<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_write_matches_sequential() {
        let mut out = vec![0u64; 12];
        for_each_chunk(&mut out, 3, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 10 + j) as u64;
            }
        });
        assert_eq!(out[0..3], [0, 1, 2]);
        assert_eq!(out[9..12], [30, 31, 32]);
    }

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(5, |i| i * i);
        assert_eq!(v, vec![0, 1, 4, 9, 16]);
    }
}
