//! Cross-paced partial curriculum learning for coupled sketch/image dictionaries.
//!
//! The pipeline learns one dictionary per modality together with sparse codes,
//! weighting samples by per-sample pacing variables that combine a self-paced
//! regularizer with partial easy-before-hard orderings. Retrieval maps test
//! features through the learned dictionaries and ranks by code distance.

pub mod curriculum;
pub mod dictionary;
pub mod error;
pub mod io;
pub mod laplacian;
pub mod model;
pub mod pacing;
pub mod retrieval;
pub mod sparse_coding;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{
    CodeLayout, CodeMatrix, Constraint, CurriculumConstraintSet, Dictionary, FeatureMatrix,
    GroupAssignment, LaplacianForm, Matrix, Modality, ModelConfig, PacingState, Regularizer,
    Vector,
};
