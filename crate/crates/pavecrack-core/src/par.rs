//! Thin dispatch layer between rayon and plain iterators.
//!
//! Every helper has a `_seq` twin that is always compiled, so benchmarks
//! can compare the two paths inside one build. The unsuffixed functions
//! route to rayon when the `parallel` feature is on.
//!
//! Callers must only use these for index-wise independent work; all
//! cross-item reductions elsewhere in the crate happen sequentially in
//! index order so results do not depend on thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `0..n` through `f`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_seq(n, f)
    }
}

/// Sequential twin of [`map_indexed`].
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Run `f` over mutable chunks of `data`, `chunk_len` elements each.
/// Chunk `i` covers `data[i * chunk_len..]`; chunks are disjoint so the
/// parallel and sequential paths write the same bytes.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for_each_chunk_mut_seq(data, chunk_len, f);
    }
}

/// Sequential twin of [`for_each_chunk_mut`].
pub fn for_each_chunk_mut_seq<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
        f(i, chunk);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_matches_seq() {
        let a = map_indexed(100, |i| i * i);
        let b = map_indexed_seq(100, |i| i * i);
        assert_eq!(a, b);
    }

    #[test]
    fn chunked_writes_match_seq() {
        let mut a = vec![0u32; 64];
        let mut b = vec![0u32; 64];
        for_each_chunk_mut(&mut a, 8, |i, c| c.iter_mut().for_each(|v| *v = i as u32));
        for_each_chunk_mut_seq(&mut b, 8, |i, c| c.iter_mut().for_each(|v| *v = i as u32));
        assert_eq!(a, b);
    }
}
