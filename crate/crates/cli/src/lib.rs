//! Command-line harness around `gep-core`: run configuration, CSV ingestion,
//! metrics streams and the `train`, `accountant`, `bench`, `project-error`
//! and `report` commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod metrics;

pub use error::{CliError, Result};
