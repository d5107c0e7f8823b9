//! Deterministic batch parallelism.
//!
//! Per-item work (forward passes, gradient accumulation, nearest-neighbour
//! scans) is split into fixed-size chunks. Each chunk produces its own partial
//! result and the partials are merged sequentially in chunk order, so the
//! floating-point result is bitwise identical regardless of thread count and
//! regardless of whether the `parallel` feature is enabled. The `*_seq`
//! variants always run on the current thread with the same chunking; they back
//! the sequential side of the benchmark suite and the equivalence tests.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of items per scheduling chunk. Fixed so that chunk boundaries, and
/// therefore merge order, never depend on thread count.
pub const CHUNK: usize = 8;

/// Maps `f` over `items`, preserving order.
pub fn map_items<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
{
    #[cfg(feature = "parallel")]
    {
        items.par_chunks(CHUNK).flat_map_iter(|chunk| chunk.iter().map(&f)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_items_seq(items, f)
    }
}

/// Sequential twin of [`map_items`].
pub fn map_items_seq<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_indices<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync,
{
    #[cfg(feature = "parallel")]
    {
        let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
        starts
            .par_iter()
            .flat_map_iter(|&s| (s..(s + CHUNK).min(n)).map(&f))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indices_seq(n, f)
    }
}

/// Sequential twin of [`map_indices`].
pub fn map_indices_seq<O, F>(n: usize, f: F) -> Vec<O>
where
    F: Fn(usize) -> O,
{
    (0..n).map(f).collect()
}

/// Maps `f` over whole chunk slices of size [`CHUNK`] (the last may be
/// shorter), preserving chunk order. Callers that batch work per chunk (one
/// network forward per chunk, say) use this instead of [`map_items`].
pub fn map_chunk_slices<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&[I]) -> O + Sync,
{
    #[cfg(feature = "parallel")]
    {
        items.par_chunks(CHUNK).map(|chunk| f(chunk)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_chunk_slices_seq(items, f)
    }
}

/// Sequential twin of [`map_chunk_slices`].
pub fn map_chunk_slices_seq<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&[I]) -> O,
{
    items.chunks(CHUNK).map(f).collect()
}

/// Folds `items` into an accumulator: each chunk folds locally starting from
/// `init()`, then the chunk accumulators are merged left to right in chunk
/// order. `merge` must be associative for the result to be meaningful; it does
/// not need to be commutative.
pub fn fold_items<I, A, FI, FF, FM>(items: &[I], init: FI, fold: FF, merge: FM) -> A
where
    I: Sync,
    A: Send,
    FI: Fn() -> A + Sync,
    FF: Fn(&mut A, &I) + Sync,
    FM: Fn(&mut A, A),
{
    #[cfg(feature = "parallel")]
    {
        let partials: Vec<A> = items
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = init();
                for item in chunk {
                    fold(&mut acc, item);
                }
                acc
            })
            .collect();
        let mut total = init();
        for p in partials {
            merge(&mut total, p);
        }
        total
    }
    #[cfg(not(feature = "parallel"))]
    {
        fold_items_seq(items, init, fold, merge)
    }
}

/// Sequential twin of [`fold_items`], with identical chunking and merge order.
pub fn fold_items_seq<I, A, FI, FF, FM>(items: &[I], init: FI, fold: FF, merge: FM) -> A
where
    FI: Fn() -> A,
    FF: Fn(&mut A, &I),
    FM: Fn(&mut A, A),
{
    let mut total = init();
    for chunk in items.chunks(CHUNK) {
        let mut acc = init();
        for item in chunk {
            fold(&mut acc, item);
        }
        merge(&mut total, acc);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_items_matches_seq() {
        let items: Vec<f32> = (0..37).map(|i| i as f32 * 0.37).collect();
        let f = |x: &f32| (x.sin() * 1e3).cos();
        assert_eq!(map_items(&items, f), map_items_seq(&items, f));
    }

    #[test]
    fn map_indices_matches_seq() {
        let f = |i: usize| (i as f64).sqrt().to_bits();
        assert_eq!(map_indices(19, f), map_indices_seq(19, f));
    }

    #[test]
    fn fold_matches_seq_bitwise() {
        // Chunked float summation: parallel and sequential paths must agree
        // bit for bit, which plain left-to-right folding would not guarantee
        // under work stealing.
        let items: Vec<f32> = (0..103).map(|i| (i as f32 * 0.718).sin() / 7.0).collect();
        let run = |par: bool| -> u32 {
            let init = || 0.0f32;
            let fold = |a: &mut f32, x: &f32| *a += *x;
            let merge = |a: &mut f32, b: f32| *a += b;
            if par {
                fold_items(&items, init, fold, merge).to_bits()
            } else {
                fold_items_seq(&items, init, fold, merge).to_bits()
            }
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn fold_empty_returns_init() {
        let items: Vec<i64> = vec![];
        let total = fold_items(&items, || 41i64, |a, x| *a += *x, |a, b| *a += b);
        assert_eq!(total, 41);
    }

    #[test]
    fn chunk_slices_match_seq_and_cover_everything() {
        let items: Vec<u32> = (0..29).collect();
        let f = |chunk: &[u32]| chunk.iter().sum::<u32>();
        let a = map_chunk_slices(&items, f);
        let b = map_chunk_slices_seq(&items, f);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(a.iter().sum::<u32>(), items.iter().sum::<u32>());
    }
}
