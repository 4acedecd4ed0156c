//! Robust extractive dialogue state tracking with spanless training.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod model;
pub mod params;
pub mod protodst;
pub mod tensor;
pub mod text;
pub mod tracker;
pub mod training;

pub use error::{DstError, Result};
