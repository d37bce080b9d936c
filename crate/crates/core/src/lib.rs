//! Three-branch text-to-image person retrieval: an RGB branch on raw inputs,
//! a grayscale branch on color-deprived images and color-masked captions,
//! and a color branch built from the difference of the two.

pub mod audit;
pub mod branches;
pub mod checkpoint;
pub mod color_ops;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
