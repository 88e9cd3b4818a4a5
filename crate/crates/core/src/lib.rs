pub mod alignment;
pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod params;
pub mod pseudo_label;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
