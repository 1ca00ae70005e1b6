//! Internal parallelism helpers.
//!
//! Work is split into fixed-size chunks whose results are combined in chunk
//! order, so outputs do not depend on the number of worker threads.

use rayon::prelude::*;

/// Rows handed to one task.
const ROW_CHUNK: usize = 8;

/// Evaluates `f` on every index in `0..len`, in parallel, preserving order.
pub fn map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..len).into_par_iter().with_min_len(256).map(f).collect()
}

/// Evaluates `f(row)` for each row of a `height`-row raster and concatenates
/// the per-row outputs.
pub fn map_rows<T, F>(height: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> Vec<T> + Sync + Send,
{
    let chunks: Vec<Vec<T>> = (0..height.div_ceil(ROW_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut out = Vec::new();
            for row in c * ROW_CHUNK..((c + 1) * ROW_CHUNK).min(height) {
                out.extend(f(row));
            }
            out
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

/// Chunked fold over `0..len` with a deterministic reduction order.
pub fn fold_chunks<A, F, R>(len: usize, chunk: usize, init: impl Fn() -> A + Sync + Send, f: F, reduce: R) -> A
where
    A: Send,
    F: Fn(&mut A, usize) + Sync + Send,
    R: Fn(A, A) -> A,
{
    let parts: Vec<A> = (0..len.div_ceil(chunk.max(1)))
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for i in c * chunk..((c + 1) * chunk).min(len) {
                f(&mut acc, i);
            }
            acc
        })
        .collect();
    parts.into_iter().fold(init(), reduce)
}

/// Evaluates `f` on consecutive ranges of `chunk` indices covering `0..len`
/// and returns the per-range results in order.
pub fn map_chunks<T, F>(len: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let chunk = chunk.max(1);
    (0..len.div_ceil(chunk)).into_par_iter().map(|c| f(c * chunk..((c + 1) * chunk).min(len))).collect()
}
