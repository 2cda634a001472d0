pub mod analysis;
pub mod backbone;
pub mod config;
pub mod error;
pub mod export;
pub mod io;
pub mod masking;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
