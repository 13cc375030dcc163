pub mod autograd;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod synthgen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
