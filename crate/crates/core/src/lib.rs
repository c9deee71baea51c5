pub mod analysis;
pub mod conditioning;
pub mod decoding;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod rvq;
pub mod sequence;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
