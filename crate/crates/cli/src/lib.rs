//! Pipeline stages behind the `ctmpc` command.
//!
//! A run directory collects one subdirectory per stage: `train`, `prune`,
//! `calibrate`, `simulate`, `attack-sweep` and `report`. Stages never
//! overwrite earlier outputs, except `report`, which is rebuilt each time.

pub mod error;
pub mod report;
pub mod run;
pub mod stages;

pub use error::{CliError, CliResult};
