//! The conversion steps: losses, schedules, the optimizer and the drivers.

mod adam;
pub mod losses;
mod plan;

pub use adam::AdamState;
pub use losses::{ce_loss, hidden_loss, kl_loss, HiddenLoss};
pub use plan::{AdamConfig, LayerReduce, Schedule, StepKind, TrainPlan, DESK_STEP2_LR, S_COS_S_END, S_COS_S_START};

mod drivers;
pub use drivers::{
    pretrain_teacher, run_step1, run_step2, run_step2a, run_step3, run_step3a, step3a_trainable_count, ReportRecord, RunCtx,
    TrainReport,
};
