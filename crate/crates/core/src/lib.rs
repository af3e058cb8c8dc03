pub mod error;
pub mod linalg;
pub mod rng;

pub use error::{Error, Result};
pub mod channel;
pub mod config;
pub mod serial;
pub mod estimation;
pub mod digital;
pub mod metrics;
pub mod hybrid;
pub mod experiment;
pub mod selftest;
