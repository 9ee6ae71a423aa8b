//! Optimizer, metrics, two-stage training, ablations and routing export.

pub mod ablate;
pub mod config;
pub mod export;
pub mod metrics;
pub mod optim;
pub mod train;

use std::sync::OnceLock;

pub use ablate::{ablate, AblationReport, Variant};
pub use config::{DataConfig, StageSchedule, TrainConfig};
pub use export::{export_routing_map, read_pgm, routing_map, write_pgm, RoutingMap};
pub use metrics::{BlockRates, Confusion, DomainReport, MetricReport};
pub use optim::{adamw_update, AdamConfig, AdamW, Moments};
pub use train::{evaluate, train, train_stage1, train_stage2, train_stage2_from, train_step, Batch, Dataset, MetricsLog, StageResult, TrainOutcome};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "URKT_THREADS";

/// Worker pool for data generation and evaluation, sized by `URKT_THREADS`
/// (default: available parallelism).
pub fn thread_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        rayon::ThreadPoolBuilder::new().num_threads(n).build().expect("worker pool")
    })
}
