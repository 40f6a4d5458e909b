//! Adaptive bi-level condensation: outer updates of synthetic pixels,
//! inner updates of network weights, and queue-based loop breaks.

mod config;
mod engine;
mod queue;
mod synthetic;

pub use config::{CondenseConfig, SyntheticInit};
pub use engine::{
    inner_step, outer_step, query_accuracy, run_condense, CondenseOutcome, CondenseState, MetricsRow, RunStats,
};
pub use queue::{div, AccQueue};
pub use synthetic::SyntheticSet;
