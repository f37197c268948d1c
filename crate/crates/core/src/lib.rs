pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod loss;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Result, SimError};
