//! Sequence-aware conditional diffusion for longitudinal 3D volumes.
//!
//! A conditioner summarizes the observed (possibly gappy) frame prefix into
//! one conditioning volume; a continuous-time Gaussian diffusion model with
//! classifier-free guidance then generates the next frame, and generated
//! frames are fed back autoregressively.

pub mod attention;
pub mod datagen;
pub mod error;
pub mod forward;
pub mod metrics;
pub mod ndcore;
pub mod network;
pub mod sampling;
pub mod schedule;
pub mod sequence;
pub mod training;

pub use error::{Error, Result};
