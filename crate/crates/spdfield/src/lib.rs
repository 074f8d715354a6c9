//! Batch front end of the SPD random field toolkit: configuration, stage
//! orchestration, artifact formats and reports.

pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::CliError;
pub use pipeline::{Outcome, Runner, Stage};
