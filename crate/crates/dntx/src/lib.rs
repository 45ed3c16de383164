//! File formats, command implementations and the live session server built
//! on `dntx-core`.

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod server;
pub mod session;

pub use error::{Error, Result};
