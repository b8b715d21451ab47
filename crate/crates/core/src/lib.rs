pub mod centralized;
pub mod decentralized;
pub mod diagnostics;
pub mod error;
pub mod fqac;
pub mod graph;
pub mod harness;
pub mod linalg;
pub mod objectives;
pub mod quantization;

pub use error::{Error, Result};
