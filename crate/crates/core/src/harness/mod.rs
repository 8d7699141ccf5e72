//! Task schedules, the continual train/eval loop and run reports.

mod metrics;
mod model;
mod report;
mod schedule;
mod trainer;

pub use metrics::{accuracy, auc_acc, avg_acc, last_acc};
pub use model::{iprompt_logits, Learner, LearnerConfig, Method, OffsetMode, ParamCounts, Pass};
pub use report::{summary_table, RunReport, TaskRecord, CSV_HEADER};
pub use schedule::{build_schedule, scale_template, schedule_from_sizes, TaskSchedule};
pub use trainer::{
    evaluate, pretrain_backbone, run_continual, train_task, PretrainConfig, RunSpec, StepEvent,
    StepObserver, TaskTrainStats, TrainConfig,
};
