//! Slice-wise CT reconstruction from bi- or mono-planar radiographs with a
//! conditional denoising diffusion model.
//!
//! The pipeline: an X-ray [`encoder`] produces multi-scale features; the
//! [`posenc`] networks embed 3-D positions of the target slice and of the
//! detector planes; the positional-query transformers in [`pqt`] turn those
//! into per-slice condition maps; the U-Net in [`denoiser`] predicts noise
//! under spatially-adaptive conditioning; [`diffusion`] trains the stack and
//! samples volumes with a deterministic DDIM sampler.

pub mod denoiser;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod par;
pub mod phantom;
pub mod posenc;
pub mod pqt;

pub use error::{Error, Result};
