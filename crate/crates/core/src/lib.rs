//! Multimodal promptable inpainting at desk scale.
//!
//! A latent diffusion inpainter that takes a scene, a mask, and an optional
//! subject image and/or text prompt. The mask region is located through
//! masked-latent conditioning and latent blending, the subject and prompt are
//! assigned through decoupled cross-attention, and subject detail is refined by
//! an auxiliary network whose self-attention features are injected into the
//! main denoiser. A synthetic data engine and an evaluation bench complete the
//! loop.

pub mod checkpoint;
pub mod codec;
pub mod conditioner;
pub mod config;
pub mod data_engine;
pub mod denoiser;
pub mod error;
pub mod evalbench;
pub mod io;
pub mod model;
pub mod nn;
pub mod refiner;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
