pub mod bench;
pub mod checkpoint;
pub mod checks;
pub mod dsp;
pub mod enhance;
pub mod error;
pub mod mlstm;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod tolerance;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Float, Tensor};
