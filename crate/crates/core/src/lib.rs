pub mod attention;
pub mod data;
pub mod embedding;
pub mod error;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
