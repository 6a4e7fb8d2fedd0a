//! Training, evaluation, inference and profiling drivers.

pub mod bench;
pub mod config;
pub mod infer;
pub mod optim;
pub mod report;
pub mod train;

pub use bench::{bench, BenchReport};
pub use config::RunConfig;
pub use infer::{evaluate, infer, infer_pair, EvalReport, InferOutput};
pub use optim::{lr_at, Adam};
pub use train::{training_pairs, validation_pairs, StepLog, Trainer};
