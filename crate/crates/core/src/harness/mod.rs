//! Synthetic tasks, run configuration, training runs, sweeps and reports.

mod reports;
mod run;
mod sweep;
pub mod tasks;

pub use reports::{
    equivalence_suite, memreport, sgd_identity_sweep, subspace_after_training, CheckVerdict, EquivOptions,
    MemReport, MemReportEntry, MemReportRequest, SGD_TOLERANCE, SLOPE_TOLERANCE, UNBIASED_TOLERANCE,
};
pub use run::{
    train_run, EquivalenceVerdict, LossPoint, MemorySection, RunConfig, RunReport, RunStatus, Trainer,
    REPORT_SCHEMA_VERSION, SUBSPACE_TOLERANCE,
};
pub use sweep::{cell_seed, sweep, CellStatus, SweepCell, SweepGrid, SweepSpec};
pub use tasks::{gen_task, Dataset, Example, TaskKind, TaskStream};
