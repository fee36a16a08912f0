//! Command-line entry points, JSON config and the HTTP service.

pub mod cli;
pub mod config;
pub mod service;

pub use config::{AppConfig, DataSource};
pub use service::{router, ServiceState};
