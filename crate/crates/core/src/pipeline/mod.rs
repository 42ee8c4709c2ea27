//! End-to-end workflows shared by the command-line tool and the tests:
//! configuration, dataset preparation, training, evaluation, plotting and
//! gradient checks.

pub mod config;
pub mod data;
pub mod evaluate;
pub mod gradcheck;
pub mod plot;
pub mod train;

pub use config::{DataConfig, RunConfig, TrainConfig};
pub use data::{prepare, Prepared};
pub use evaluate::{evaluate, predict, EvaluationTable, Prediction};
pub use train::{batch_loss, batch_loss_value, load_model, mean_loss, mean_total, StepRecord, Trainer};
