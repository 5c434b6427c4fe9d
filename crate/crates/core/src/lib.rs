//! Relation extraction for visually-rich documents with global structure
//! guidance: bi-affine pair scoring, spatial-prefix windowed attention over
//! the pair grid, global token interaction, and gated iterative refinement.

pub mod ablation;
pub mod docmodel;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod rng;
pub mod synthgen;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
