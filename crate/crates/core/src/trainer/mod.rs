//! Toy multi-task network, optimizer and experiment drivers.

pub mod config;
pub mod data;
pub mod experiments;
pub mod gradcheck;
pub mod network;
pub mod optim;
pub mod run;

pub use config::{ClassificationForm, ConfigError, Target, TaskSpec, TrainConfig, TrainMode};
pub use network::ToyNetwork;
pub use optim::{lr_at, sgd_step, OptimError, OptimizerState};
pub use run::{train, IterRow, RunRecord, TrainError, TrainOutcome};
