pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
