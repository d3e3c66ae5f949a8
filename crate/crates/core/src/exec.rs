//! Bounded data-parallel execution of independent work items.
//!
//! Trials, perturbation sweeps, and batch classification all fan out through
//! [`map_bounded`]. With the `parallel` feature (default) the work runs on a
//! dedicated rayon pool sized to the bound, which is what caps the number of
//! in-flight provider requests; without it everything degrades to a
//! sequential loop with identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to every item, never running more than `bound` items at once.
/// Output order matches input order.
pub fn map_bounded<T, R, F>(items: Vec<T>, bound: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if bound > 1 && items.len() > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(bound)
                .build()
                .expect("failed to build worker pool");
            return pool.install(|| items.into_par_iter().map(f).collect());
        }
    }
    let _ = bound;
    map_sequential(items, f)
}

/// Sequential reference path, always available regardless of features.
pub fn map_sequential<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    #[test]
    fn preserves_input_order() {
        let out = map_bounded((0..100).collect(), 8, |n| n * 2);
        assert_eq!(out, (0..100).map(|n| n * 2).collect::<Vec<_>>());
    }

    #[test]
    fn respects_concurrency_bound() {
        let in_flight = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        map_bounded((0..64).collect::<Vec<u32>>(), 4, |_| {
            let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(2));
            in_flight.fetch_sub(1, Ordering::SeqCst);
        });
        assert!(peak.load(Ordering::SeqCst) <= 4, "peak {}", peak.load(Ordering::SeqCst));
    }

    #[test]
    fn bound_of_one_is_sequential() {
        let out = map_bounded(vec![1, 2, 3], 1, |n| n + 1);
        assert_eq!(out, vec![2, 3, 4]);
    }
}
