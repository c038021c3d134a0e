//! Concurrent fitness evaluation for the search command.

use quadranet_core::nas::{Evaluator, Genome, SearchSpace, TrainEvaluator};
use quadranet_core::Result;
use rayon::prelude::*;

pub const THREADS_ENV: &str = "QUADRANET_THREADS";

/// Worker count: `QUADRANET_THREADS` if set to a positive integer, else the
/// number of available cores.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains the genomes of one batch on a private rayon pool. Each evaluation
/// is self-contained and seeded, so results do not depend on the thread count.
pub struct ParallelEvaluator {
    pub inner: TrainEvaluator,
    pool: rayon::ThreadPool,
}

impl ParallelEvaluator {
    pub fn new(inner: TrainEvaluator, threads: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .expect("thread pool");
        Self { inner, pool }
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Evaluator for ParallelEvaluator {
    fn evaluate(&mut self, space: &SearchSpace, genome: &[usize]) -> Result<f64> {
        self.inner.fitness(space, genome)
    }

    fn evaluate_many(&mut self, space: &SearchSpace, genomes: &[Genome]) -> Result<Vec<f64>> {
        let inner = &self.inner;
        self.pool
            .install(|| genomes.par_iter().map(|g| inner.fitness(space, g)).collect())
    }
}
