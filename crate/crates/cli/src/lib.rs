//! Configuration, scenario registry and drivers behind the `mvbismut`
//! command-line tool.

pub mod acceptance;
pub mod config;
pub mod error;
pub mod output;
pub mod registry;
pub mod runner;
pub mod sweep;

pub use config::ScenarioConfig;
pub use error::{FieldError, RunError};
pub use output::ResultRow;
pub use runner::{run_scenario, ScenarioReport};
pub use sweep::{convergence_sweep, SweepAxis, SweepTable};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
