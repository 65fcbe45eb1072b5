//! Time-scale modification of audio: a convolutional autoencoder whose
//! temporally compressed latent (the Neuralgram) is resized by cubic
//! interpolation, plus the classical OLA, WSOLA and phase-vocoder baselines,
//! adversarial training and an evaluation harness.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod adversary;
pub mod audio;
pub mod autograd;
pub mod checkpoint;
pub mod classical;
pub mod dsp;
pub mod engine;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use checkpoint::Checkpoint;
pub use engine::{scale_neuralgram, speed_grid, stretch, ChunkPolicy, Method};
pub use error::{Error, Result};
pub use model::{ModelConfig, SUPPORTED_RATIOS};
pub use scalar::Scalar;
pub use trainer::{TrainConfig, Trainer};

pub type Waveform32 = audio::Waveform<f32>;
pub type Waveform64 = audio::Waveform<f64>;
pub type Neuralgram32 = model::Neuralgram<f32>;
pub type Neuralgram64 = model::Neuralgram<f64>;
pub type Autoencoder32 = model::Autoencoder<f32>;
pub type Autoencoder64 = model::Autoencoder<f64>;
pub type Discriminator32 = adversary::MultiScaleDiscriminator<f32>;
pub type Discriminator64 = adversary::MultiScaleDiscriminator<f64>;
