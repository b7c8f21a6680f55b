//! Operational layer: run configuration, synthetic data, training,
//! evaluation and on-disk formats.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod gradcheck;
pub mod synth;
pub mod train;
pub mod volume;

pub use checkpoint::Checkpoint;
pub use config::{DataConfig, RunConfig};
pub use evaluate::{evaluate, PairEval};
pub use synth::{load_dataset, save_dataset, synth_dataset, Dataset, Pair, SynthParams};
pub use train::{run_training, train, EpochLog, TrainReport};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "DEFXATTN_THREADS";

/// Worker threads: `DEFXATTN_THREADS` if set to a positive integer, else the
/// available parallelism.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// `(0..n).map(f)` spread over [`worker_count`] threads; results keep index
/// order.
pub fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = worker_count().min(n.max(1));
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || (w..n).step_by(workers).map(|i| (i, f(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(Option::unwrap).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        assert_eq!(parallel_map(10, |i| i * i), (0..10).map(|i| i * i).collect::<Vec<_>>());
        assert!(parallel_map(0, |i| i).is_empty());
    }
}
