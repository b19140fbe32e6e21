//! Command-line front end: CSV and TOML ingestion, fitting, verification and JSON reports.

pub mod cli;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod ingest;
pub mod report;
pub mod schema;
pub mod verify;

pub use error::{CliError, Result};
