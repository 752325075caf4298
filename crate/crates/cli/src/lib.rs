//! Configuration, CSV artifacts and stage orchestration behind the `semicomp`
//! command.

pub mod config;
pub mod io;
pub mod pipeline;

pub use config::RunConfig;
pub use pipeline::{run, Command, FailureKind, Manifest, PipelineError};
