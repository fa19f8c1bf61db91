//! Files, pipelines and command-line front end around `redt-core`.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::{AppError, AppResult};
