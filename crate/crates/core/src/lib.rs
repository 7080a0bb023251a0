pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod flow;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
