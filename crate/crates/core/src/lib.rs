//! Two-stage skin lesion analysis: a region-proposal detector localizes the
//! lesion, and a dense encoder/decoder segments the cropped region.

pub mod data;
pub mod detection;
pub mod error;
pub mod geometry;
pub mod layers;
pub mod mask;
pub mod pipeline;
pub mod skinnet;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
