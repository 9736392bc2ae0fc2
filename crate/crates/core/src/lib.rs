pub mod align;
pub mod attacks;
pub mod channel;
pub mod codebook;
pub mod config;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod sim_index;
pub mod group_identifier;
pub mod harness;
pub mod spectrum;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(test)]
#[path = "../tests/common/oracle.rs"]
#[allow(dead_code)]
mod test_oracle;
