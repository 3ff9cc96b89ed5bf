//! Audio-assisted test-time adaptation for video classifiers.

pub mod adapt;
pub mod audiomap;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
