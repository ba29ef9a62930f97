pub mod arch;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::{Scalar, Tensor};
