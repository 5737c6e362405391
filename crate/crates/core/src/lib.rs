pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
