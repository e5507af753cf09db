//! The search loop, its random baselines, run logs and reports.

mod config;
mod report;
mod run;
mod runlog;
mod train;

pub use config::{SearchConfig, MIB};
pub use report::{finalize_report, Report, REPORT_FORMAT};
pub use run::{retrain_genotype, run_random_variant, run_spidernet, DeletionMode, RandomVariant, SearchObserver};
pub use runlog::{
    AttemptOutcome, AttemptRecord, CycleRecord, DeletionCause, DeletionRecord, EpochRecord, FinalStats,
    MutationRecord, Phase, RunKind, RunLog, SkippedDeletion, Timings, RUNLOG_FORMAT,
};
pub use train::{evaluate, random_deletions, train_prune, PhaseDeletion, TrainSettings};
