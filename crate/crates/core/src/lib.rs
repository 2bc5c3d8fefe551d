//! Joint image/text diffusion for scene-text super-resolution.
//!
//! One multimodal transformer predicts an image velocity (continuous flow
//! matching on the high-resolution image) and a text posterior (absorbing-state
//! masked diffusion on the transcription). Training combines an image loss
//! with an EMA-teacher guided target, a stratified text NELBO and a joint
//! loss where both modalities share one corruption time. Sampling runs the
//! Euler ODE step and the reverse unmasking transition in lockstep.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod imageflow;
pub mod metrics;
pub mod mmformer;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod synthdata;
pub mod textdiff;
pub mod trainer;

pub use error::{Error, Result};
pub use imageflow::{GuidanceConfig, ImageGrid};
pub use mmformer::{ModelConfig, MmFormer};
pub use schedule::{LogLinear, NoiseSchedule, TimestepBatch};
pub use textdiff::{TextPosterior, TokenSequence, Vocab};
