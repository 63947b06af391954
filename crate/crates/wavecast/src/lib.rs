//! File formats, experiment orchestration and the `wavecast` command line
//! on top of `wavecast-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decompose;
pub mod embedding;
pub mod error;
pub mod io;
pub mod report;
pub mod runner;
pub mod selftest;

pub use error::{AppError, AppResult};
