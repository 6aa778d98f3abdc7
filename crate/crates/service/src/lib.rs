//! HTTP service and pipeline commands over `crfcheck-core`.

pub mod api;
pub mod assistant;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod state;
mod store;
