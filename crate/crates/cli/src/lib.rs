//! Pipeline orchestration for the `musicot` binary: configuration, stage
//! bookkeeping and the commands themselves.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_evaluate, cmd_gen_data, cmd_sample, cmd_train_lm, cmd_train_rvq};
pub use config::{ExperimentConfig, Mode};
pub use error::{CliError, Result};
