//! Order-preserving map helpers over slices and index ranges.
//!
//! With the `parallel` feature (default) the `map_*` functions fan out over
//! the rayon pool; without it they run sequentially. Both paths return
//! results in input order, so downstream reductions see the same element
//! order either way. Callers that need bitwise-stable floating-point sums
//! reduce the returned `Vec` sequentially.
//!
//! `map_indices_seq` / `map_slice_seq` are always compiled; the criterion
//! bench suite uses them as the sequential reference.

/// Map `f` over `0..n`, preserving index order.
#[cfg(feature = "parallel")]
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indices_seq(n, f)
}

/// Sequential counterpart of [`map_indices`]; always available.
pub fn map_indices_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Map `f` over a slice, preserving element order.
#[cfg(feature = "parallel")]
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    map_slice_seq(items, f)
}

/// Sequential counterpart of [`map_slice`]; always available.
pub fn map_slice_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Configure the global worker pool. `workers = 0` keeps the default
/// (physical core count). Returns an error only if a pool was already
/// built with a different size; callers may ignore it when re-entering.
#[cfg(feature = "parallel")]
pub fn configure_workers(workers: usize) -> std::result::Result<(), String> {
    if workers == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| e.to_string())
}

#[cfg(not(feature = "parallel"))]
pub fn configure_workers(_workers: usize) -> std::result::Result<(), String> {
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let out = map_indices(100, |i| i * i);
        let seq = map_indices_seq(100, |i| i * i);
        assert_eq!(out, seq);
    }

    #[test]
    fn slice_map_matches_sequential() {
        let items: Vec<f64> = (0..50).map(|i| i as f64 * 0.25).collect();
        let par = map_slice(&items, |x| x.sin());
        let seq = map_slice_seq(&items, |x| x.sin());
        assert_eq!(par, seq);
    }
}
