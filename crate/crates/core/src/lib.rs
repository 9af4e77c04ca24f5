pub mod config;
pub mod em;
pub mod error;
pub mod filter;
pub mod io;
pub mod metrics;
pub mod model;
pub mod povm;
pub mod sim;
pub mod sweep;

pub use error::{Error, Result};
