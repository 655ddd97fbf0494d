//! Command-line surface: corpus generation, training, sampling, evaluation,
//! ablation and the oracle suites, each reproducible from a run config and a seed.

pub mod args;
pub mod commands;
pub mod error;
pub mod lock;

pub use args::{Cli, Command, Overrides};
pub use commands::{main_with_args, run};
pub use error::{CliError, CliResult, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC};
