//! Training, evaluation, inference and benchmarking on top of the model.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod infer;
pub mod optim;
pub mod train;

pub use bench::{benchmark, measure_peak_affinity, BenchRow};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use eval::{aggregate, evaluate, EvalReport};
pub use infer::{infer, InferOptions};
pub use optim::{Adam, AdamConfig};
pub use train::{train, train_ensemble, EpochMetrics, TrainOutcome};

/// Environment variable that forces single-threaded, reproducible execution when set to
/// anything other than `0` or an empty string.
pub const DETERMINISTIC_ENV: &str = "GRIDSEG_DETERMINISTIC";

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

/// Worker threads for embarrassingly parallel work; one in deterministic mode.
pub fn worker_threads() -> usize {
    if deterministic_mode() {
        1
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}
