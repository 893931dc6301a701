//! Joint video–action co-generation with a multimodal rectified flow.

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod evalsuite;
pub mod flowcore;
pub mod model;
pub mod nn;
pub mod par;
pub mod params;
pub mod refiner;
pub mod tensor;
pub mod toyworld;
pub mod trainer;

pub use error::{CovarError, Result};
