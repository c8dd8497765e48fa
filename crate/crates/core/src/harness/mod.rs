//! Training, evaluation, decoding and the diagnostic commands.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod probe;
pub mod train;

pub use config::{OptimConfig, RunConfig};
pub use eval::{edit_distance, evaluate, EditCounts, EvalReport, FireStats};
pub use train::{train, StepMetrics, TrainOutcome};

#[cfg(test)]
mod tests;
