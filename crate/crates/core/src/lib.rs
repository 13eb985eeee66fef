pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod graph;
pub mod learn;
pub mod mending;
pub mod metrics;
pub mod seed;
pub mod server;

pub use error::{Error, Result};
