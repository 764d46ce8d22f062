//! Media ingest and serving building blocks.

pub mod config;
pub mod event;
pub mod functions;
pub mod apps;
pub mod glob;
pub mod http;
pub mod lifecycle;
pub mod media;
pub mod runtime;
pub mod volume;
