//! HTTP job service and command-line frontends for `makeup-core`.

pub mod api;
pub mod cli;
pub mod jobs;
pub mod prepare;
pub mod store;
