#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod data;
pub mod error;
pub mod math;
pub mod metrics;
pub mod model;
pub mod mscnn;
pub mod pipeline;
pub mod substrate;
pub mod t2t;
pub mod wavelet;

pub use error::{Error, Result};
