//! Thin execution helpers: data-parallel via rayon when the `parallel`
//! feature is on, plain loops otherwise. Parallel variants split work into
//! disjoint output regions only, so results are bitwise identical to the
//! sequential path regardless of thread count.

/// Fills `out` in chunks of `chunk` elements, one closure call per chunk.
#[cfg(feature = "parallel")]
pub fn fill_chunks<T: Send, F>(out: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    out.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn fill_chunks<T: Send, F>(out: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    fill_chunks_seq(out, chunk, f);
}

/// Sequential twin of [`fill_chunks`]; always compiled so benchmarks can
/// compare both paths in one build.
pub fn fill_chunks_seq<T, F>(out: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Maps `0..n` to a vector, preserving index order in the output.
#[cfg(feature = "parallel")]
pub fn map_indexed<R: Send, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<R: Send, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync,
{
    map_indexed_seq(n, f)
}

/// Sequential twin of [`map_indexed`].
#[allow(dead_code)]
pub fn map_indexed_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}
