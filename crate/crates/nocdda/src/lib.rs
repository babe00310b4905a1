//! Noise-optimized conditional diffusion for unsupervised domain adaptation,
//! at desk scale.
//!
//! The crate trains a time-aware classifier and a noise-prediction network on
//! low-dimensional synthetic domain-shift benchmarks, selects high-confidence
//! pseudo-labeled target samples by prediction entropy, aligns domains with a
//! conditional adversarial discriminator, and generates class-specific target
//! samples by classifier-guided DDIM sampling initialized from per-class
//! terminal distributions estimated under finite forward diffusion.
//!
//! Every stage is deterministic given its seed. See the `examples/` directory
//! for one runnable program per capability, and the `nocdda` binary for the
//! command-line front-end (`gen-data`, `train-source`, `adapt`, `sample`,
//! `eval`, `ablate`, `plot`).

pub mod diffusion;
pub mod error;
pub mod nn;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
