//! Evidential center-point object detection.
//!
//! Objectness is modelled per class and pixel as a two-outcome Dirichlet,
//! box dimensions as Normal-Inverse-Gamma evidence, so a single forward pass
//! yields detections together with classification and size uncertainty.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod evidential;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod special;
pub mod synth;
pub mod targets;
pub mod tensor;
pub mod trainer;

pub use error::{CheckpointError, Error, ErrorKind, Result};
pub use tensor::Tensor;
