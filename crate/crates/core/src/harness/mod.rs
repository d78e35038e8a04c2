//! Training loop, evaluation, channel traces and checkpoints.

mod checkpoint;
mod eval;
mod optim;
mod report;
mod trace;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Entry, CHECKPOINT_MAGIC};
pub use eval::{argmax_channels, evaluate, mean_iou, EvalReport, IouCounts, Metric, TaskEval};
pub use optim::Sgd;
pub use report::{
    lane_label, metrics_header, metrics_row, trace_rows, trace_summary_rows, TRACE_HEADER, TRACE_SUMMARY_HEADER,
};
pub use trace::{record_trace, ChannelTrace, LayerSummary, RecoveryTracker, StreamSummary, TraceRow};
pub use train::{step_gradients, train_step, MetricsRecord, StepGradients, TrainConfig, Trainer};
