pub mod cbhg;
pub mod codec;
pub mod corpus;
pub mod error;
pub mod frontend;
pub mod models;
pub mod nn;
pub mod synthesis;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod vocoder;

pub use error::{Error, Result};
pub use tensor::Tensor;
