//! Data-parallel map helpers with a sequential fallback.
//!
//! Every parallel loop in this crate goes through [`map_collect`]: an indexed
//! map whose output order matches input order, so results are bitwise
//! identical no matter how many threads run it. Reductions over the mapped
//! values (e.g. gradient accumulation) always happen afterwards, sequentially
//! and in index order.
//!
//! With the `parallel` feature disabled the crate has no rayon dependency and
//! everything runs on one thread.

/// Sequential map, always available. Benchmarks use this as the baseline.
pub fn map_collect_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(feature = "parallel")]
pub fn map_collect<T, U, F>(items: &[T], parallel: bool, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    if parallel {
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    } else {
        map_collect_seq(items, f)
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, U, F>(items: &[T], _parallel: bool, f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U,
{
    map_collect_seq(items, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = map_collect_seq(&xs, |i, x| i as u64 * 1000 + x);
        let par = map_collect(&xs, true, |i, x| i as u64 * 1000 + x);
        assert_eq!(seq, par);
    }
}
