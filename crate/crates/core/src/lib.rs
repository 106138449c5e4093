//! Volumetric diffusion inpainting for multicontrast scans.
//!
//! The engine fills designated regions with healthy-appearing tissue or
//! synthesizes lesion-like patterns inside them, driven by two masks: a
//! conditioning mask describing the desired lesion configuration and a
//! repaint mask bounding the voxels the sampler may touch. Everything
//! else is copied from the input exactly. Inference runs a DDIM
//! subsequence with repeated repaint mixing per step, slice by slice in
//! three cardinal views, and fuses the views by per-voxel median.

pub mod components;
pub mod denoiser;
pub mod error;
pub mod nifti;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod volume;

pub use error::{Error, Result};
