//! Pipeline orchestration for circuit discovery experiments: configuration,
//! the content-addressed workspace, the stages and report emission.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod workspace;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use pipeline::{Outcome, Pipeline};
pub use workspace::Workspace;
