//! Face image quality from the stability of patch embeddings across the
//! blocks of a Vision Transformer, computed in one forward pass with no
//! gradients, plus the error-versus-discard harness used to evaluate
//! quality scorers.
//!
//! Pipeline: [`model_io::read_model`] → [`vit::preprocess`] →
//! [`quality::score_image`] (which runs [`vit::forward_with_taps`]) →
//! [`evaluation::edc_curve`].

pub mod cli;
pub mod degradation;
pub mod error;
pub mod evaluation;
pub mod model_io;
pub mod quality;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
