pub mod atomic;
pub mod datasets;
pub mod deploy;
pub mod distill;
pub mod error;
pub mod matching;
pub mod models;
pub mod nn;
pub mod seed;

pub use error::{Error, Result};
