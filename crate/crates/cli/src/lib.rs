//! Config-driven pipeline driver: corpus preparation through concept
//! reports, one stage at a time.

pub mod app;
pub mod config;
pub mod manifest;
pub mod report;
pub mod runlog;
pub mod stages;

pub use app::{run, Cli};
pub use config::PipelineConfig;
pub use stages::{Outcome, Stage, PIPELINE};
