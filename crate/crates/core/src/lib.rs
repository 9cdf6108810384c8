//! Counterfactual image generation with a causally disentangled latent space.
//!
//! The pipeline splits an image's latent code into identity channels and a
//! pathology channel, models their interaction with a small self-attention
//! network, generates new pathology factors with a label-conditioned latent
//! diffusion model, and improves rare-class generation by optimizing the
//! initial diffusion noise against a reference-set centroid.
//!
//! Everything runs on the CPU in double precision on a hand-rolled reverse-mode
//! tape ([`autodiff`]); parameters are stored as little-endian `f32` so
//! checkpoints round-trip bit-exactly.

pub mod ablation;
pub mod acceptance;
pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod seed_opt;
pub mod ssim;
pub mod synthetic;
pub mod transformer;
pub mod vae;

pub use error::{Error, Result};
