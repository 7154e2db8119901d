pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod nn;
pub mod np;
pub mod rng;
pub mod ssl;

pub use error::{Error, Result};
