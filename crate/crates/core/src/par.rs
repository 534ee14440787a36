//! Data-parallel helpers with a sequential fallback.
//!
//! Per-item work in this pipeline (utterance synthesis, batch encoding,
//! retrieval scans, per-utterance metrics) is pure, so it parallelizes with
//! no change in results: `map` preserves order and `argmin_by_key` resolves
//! ties by lowest index regardless of how the input was split.
//!
//! With the `parallel` feature (default) the work runs on rayon; without it
//! everything is sequential. The `*_seq` variants are always sequential so
//! the two paths can be benchmarked against each other in one build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Order-preserving parallel map.
#[cfg(feature = "parallel")]
pub fn map<T: Sync, U: Send, F: Fn(&T) -> U + Sync + Send>(items: &[T], f: F) -> Vec<U> {
    items.par_iter().map(f).collect()
}

/// Order-preserving map (sequential build).
#[cfg(not(feature = "parallel"))]
pub fn map<T, U, F: Fn(&T) -> U>(items: &[T], f: F) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Sequential map, kept unconditionally for benchmarking against `map`.
pub fn map_seq<T, U, F: Fn(&T) -> U>(items: &[T], f: F) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Index of the minimum key, ties broken by lowest index. Keys must be finite.
#[cfg(feature = "parallel")]
pub fn argmin_by_key<T: Sync, F: Fn(usize, &T) -> f64 + Sync + Send>(
    items: &[T],
    key: F,
) -> Option<usize> {
    items
        .par_iter()
        .enumerate()
        .map(|(i, t)| (key(i, t), i))
        .reduce_with(|a, b| if better(a, b) { a } else { b })
        .map(|(_, i)| i)
}

/// Index of the minimum key, ties broken by lowest index (sequential build).
#[cfg(not(feature = "parallel"))]
pub fn argmin_by_key<T, F: Fn(usize, &T) -> f64>(items: &[T], key: F) -> Option<usize> {
    argmin_by_key_seq(items, key)
}

/// Sequential argmin, kept unconditionally for benchmarking and as an oracle.
pub fn argmin_by_key_seq<T, F: Fn(usize, &T) -> f64>(items: &[T], key: F) -> Option<usize> {
    items
        .iter()
        .enumerate()
        .map(|(i, t)| (key(i, t), i))
        .fold(None, |best, cand| match best {
            None => Some(cand),
            Some(b) => Some(if better(cand, b) { cand } else { b }),
        })
        .map(|(_, i)| i)
}

/// Total order on (key, index): smaller key wins, then smaller index.
/// Associative and commutative, so parallel reduction order cannot change
/// the winner.
fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}
