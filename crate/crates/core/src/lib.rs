//! Boundary-aware refinement of class activation maps for weakly
//! supervised semantic segmentation.

pub mod cli;
pub mod edge;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod ioformats;
pub mod loss;
pub mod refine;
pub mod sbdm;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
