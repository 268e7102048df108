//! Command-line and HTTP front end: parses the `run` grammar, admits jobs
//! against governance, drives them through the execution backends and
//! streams their status.

pub mod cli;
pub mod client;
pub mod config;
pub mod http;
pub mod service;

pub use cli::{parse_run_command, ParseError, RunRequest, TemplateRef};
pub use config::GatewayConfig;
pub use service::{
    DryRunReport, Gateway, GatewayError, JobSummary, JobView, StatusEvent, Submission,
};
