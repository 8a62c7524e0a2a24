//! Prompt-conditioned diffusion at desk scale.
//!
//! A pixel-space denoising diffusion model whose control branch reads a
//! vision-language prompt (an example source/target pair, a query image and
//! text guidance), trained jointly on forward and inverse image-translation
//! tasks over a procedural shapes corpus.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod evalsuite;
pub mod imageio;
pub mod network;
pub mod nn;
pub mod pipeline;
pub mod prompting;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
