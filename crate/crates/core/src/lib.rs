//! GroVE: post-hoc probabilistic embeddings for frozen vision-language
//! models.
//!
//! A shared set of low-dimensional latent points is mapped to image and text
//! embedding spaces by two sparse variational Gaussian processes. Training
//! fits the latents and both GPs to deterministic embeddings; at inference a
//! new embedding is mapped back to a latent point and the GP's predictive
//! distribution there becomes its probabilistic embedding.

pub mod dataio;
pub mod error;
pub mod gplvm;
pub mod inference;
pub mod kernels;
pub mod metrics;
pub mod numerics;
pub mod par;
pub mod svgp;
pub mod synthetic;

#[cfg(test)]
mod testutil;

pub use error::{GroveError, Result};
