//! HTTP service and batch CLI around the `linkwerk` library.

pub mod api;
pub mod cli;
pub mod config;
pub mod manifest;
pub mod service;

pub use api::{router, AppState, MEDIA_TYPE};
pub use config::ServiceConfig;
pub use service::{open_state, ServiceError};
