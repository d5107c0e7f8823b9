//! Orchestration: run configuration, demo collection, the training loop,
//! evaluation, the distance-metric benchmark, metrics persistence, and
//! whole-run checkpoints.

mod bench;
mod checkpoint;
mod collect;
mod config;
mod metrics;
mod train;

pub use bench::{metric_bench, BenchReport, BenchRow, BENCH_FILE};
pub use checkpoint::{load_run_checkpoint, save_run_checkpoint, CHECKPOINT_DIR, DIAGNOSTIC_DIR};
pub use collect::{collect_demos, CollectSummary};
pub use config::{
    BenchSection, DemoSection, EnvSection, FlagSection, LearnerSection, ModelSection, RunConfig,
    RunSection, ShapingSection, ACTION_DIM,
};
pub use metrics::{MetricsRow, MetricsWriter, METRICS_COLUMNS, METRICS_FILE};
pub use train::{
    evaluate_run, evaluate_scripted, train, EvalReport, TrainOutcome, CONFIG_SNAPSHOT,
};
