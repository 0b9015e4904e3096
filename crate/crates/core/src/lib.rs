pub mod dim_aware;
pub mod error;
pub mod graph;
pub mod harness;
pub mod kv;
pub mod model;
pub mod numerics;
pub mod type_aware;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
