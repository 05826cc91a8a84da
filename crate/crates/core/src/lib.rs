//! Signal-to-latent autoencoder, semantic alignment losses, and a conditioned
//! latent diffusion model at desk scale.

pub mod config;
pub mod container;
pub mod data;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod filter;
pub mod gradsuite;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod params;
pub mod train;

pub use error::{Error, Result};
