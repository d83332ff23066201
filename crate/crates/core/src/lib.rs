//! Fully binary point-cloud transformer: bit-packed kernels, binarizers,
//! dynamic/static hybrid quantization, model layers, training and cost
//! accounting.

pub mod bench;
pub mod binmodules;
pub mod bittensor;
pub mod cost;
pub mod error;
pub mod hybridize;
pub mod quantize;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
