//! Coherent entity-aware multi-image captioning.
//!
//! A four-stream transformer caption generator trained jointly with a
//! vertical (caption ↔ image and text) and two horizontal (caption ↔
//! neighbouring captions) contrastive coherence objectives, decoded with a
//! two-level beam search and evaluated with caption-quality and
//! caption-coherence metrics.

pub mod autodiff;
pub mod checkpoint;
pub mod coherence;
pub mod commands;
pub mod corpus;
pub mod decode;
pub mod decoder;
pub mod error;
pub mod encoders;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod parallel;
pub mod pipeline;
pub mod layers;
pub mod model;
pub mod objective;
pub mod params;
pub mod sampler;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
