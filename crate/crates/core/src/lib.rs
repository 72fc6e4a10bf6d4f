//! Imitation learning under low-bit quantization with saliency-weighted
//! distillation: behaviour cloning, fake-quantized training, perturbation
//! saliency, toy control environments and integer inference kernels.

pub mod config;
pub mod envs;
pub mod eval;
pub mod io;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod qkernels;
pub mod quant;
pub mod rng;
pub mod saliency;
pub mod training;

pub use error::{Category, Error, Result};
