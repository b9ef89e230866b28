//! Command-line surface: configuration, commands, CSV output.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_bench, cmd_bias, cmd_gradcheck, cmd_paths, cmd_train, splitmix64, BiasArgs, BiasOutcome,
    GradcheckOutcome, TrainSummary,
};
pub use config::{ConfigArgs, DtypeChoice, RunConfig, SEED_ENV};
