//! Run orchestration: training and evaluation loops, metrics, checkpoints,
//! ablation suites and plots.

pub mod ablation;
pub mod checkpoint;
pub mod metrics;
pub mod plot;
pub mod train;

pub use ablation::{run_ablation_suite, Axis, ComparisonRow};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use metrics::MetricsRow;
pub use plot::emit_plots;
pub use train::{evaluate_checkpoint, evaluate_policy, run_training, EvalSummary, TrainingSummary};
