//! Visual perturbation-aware collaborative learning for VQA on a synthetic
//! prior-shift benchmark: tensor autodiff, data generator, base model,
//! bottleneck, perturbation controller, discriminators and trainer.

pub mod discriminators;
pub mod error;
pub mod gradsuite;
pub mod kv;
pub mod model;
pub mod perturb;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vib;

pub use error::{Error, Result};
