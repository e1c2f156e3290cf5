//! Desk-scale 4D generation pipeline: a multi-view video denoiser with
//! temporal motion modules, a hash-encoded dynamic neural field, a volumetric
//! renderer, a procedural animated-scene dataset, and a score-distillation
//! optimizer that ties them together. Everything runs on the CPU in f32 and
//! is deterministic given a seed.

pub mod checkpoint;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod field;
pub mod metrics;
pub mod optim;
pub mod render;
pub mod scenes;
pub mod tensor;
pub mod video;

pub use error::{Error, Result};
pub use tensor::Tensor;
