//! Run orchestration: early stopping, evaluation, metrics, result files and
//! the method registry.

mod config;
mod eval;
mod method;
mod protocol;
mod report;
mod run;

pub use eval::{argmax, compute_metrics, confusion_with_unseen, error_rate, evaluate_logits, mean, ConfusionMatrix, Evaluation};
pub use protocol::{early_stop_loop, EarlyStopReport, TrainProtocol, Trainable};
pub use method::{ContinualMethod, TaskContext, TaskOutcome};
pub use config::{MethodBase, MethodName, RunConfig, ScenarioConfig};
pub use report::{run_files, std_dev, CurvePoint, MethodSummary, Report};
pub use run::{build_method, execute, read_run, run_stream, write_run, JobResult, RunRecord, TaskRecord, Workload};
