pub mod data;
pub mod desk;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod regressor;
pub mod rng;
pub mod tensor;
pub mod verify;
pub mod train;

pub use error::{Error, Result};
