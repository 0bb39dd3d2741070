//! Thin dispatch layer between the rayon and sequential execution paths.
//!
//! Every helper here has the same observable behavior with and without the
//! `parallel` feature: work items are independent, outputs are written to
//! disjoint chunks or collected in index order, and no reduction ever splits
//! a single output element. Swapping execution mode therefore never changes
//! a single bit of the result.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Size the global worker pool (first call wins; later calls are ignored).
/// A no-op in sequential builds.
pub fn configure_workers(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

/// Below this many output elements the rayon dispatch costs more than the
/// kernel; such calls take the sequential path (bit-identical either way).
const PAR_MIN_LEN: usize = 4096;

/// Apply `f` to every `chunk_len`-sized chunk of `data`, passing the chunk index.
pub fn for_each_chunk_mut<S, F>(data: &mut [S], chunk_len: usize, f: F)
where
    S: Send,
    F: Fn(usize, &mut [S]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if data.len() >= PAR_MIN_LEN && data.len() > chunk_len {
        data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Sequential twin of [`for_each_chunk_mut`], always available for benchmarks.
pub fn for_each_chunk_mut_seq<S, F>(data: &mut [S], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [S]),
{
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Map `f` over `0..n`, collecting results in index order.
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
        (0..n).map(f).collect()
    }
}

/// Chunk size used by [`det_sum`]; fixed so the summation tree does not
/// depend on thread count.
const SUM_CHUNK: usize = 1024;

/// Deterministic sum: per-chunk partials (chunks of [`SUM_CHUNK`]) folded in
/// index order. The parallel and sequential paths produce identical floats.
pub fn det_sum(data: &[f64]) -> f64 {
    det_sum_by(data, |&x| x)
}

/// Deterministic sum of `f(x)` over `data`, same chunking as [`det_sum`].
pub fn det_sum_by<S, F>(data: &[S], f: F) -> f64
where
    S: Sync,
    F: Fn(&S) -> f64 + Sync + Send,
{
    let partials: Vec<f64> = {
        #[cfg(feature = "parallel")]
        {
            data.par_chunks(SUM_CHUNK).map(|c| c.iter().map(&f).sum::<f64>()).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            data.chunks(SUM_CHUNK).map(|c| c.iter().map(&f).sum::<f64>()).collect()
        }
    };
    partials.iter().sum()
}
