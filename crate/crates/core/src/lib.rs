//! Semantic audio VAE: spectrogram autoencoder with adversarial,
//! contrastive and teacher-distillation training, plus evaluation tools.

pub mod augment;
pub mod cli;
pub mod discriminator;
pub mod dsp;
pub mod eval;
pub mod gradsuite;
pub mod error;
pub mod losses;
pub mod model;
pub mod synth;
pub mod teacher;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
