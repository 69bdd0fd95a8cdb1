//! Uncertainty quantification for multiple-choice visual question answering.
//!
//! The crate measures epistemic and aleatoric uncertainty from the token
//! log-probabilities of chat models, mitigates prompt-introduced biases by
//! averaging answer distributions over perturbed prompts, and evaluates the
//! resulting confidence scores with AUROC and regression analyses. A
//! deterministic synthetic model makes the whole pipeline runnable offline.

pub mod dataset;
pub mod gateway;
pub mod metrics;
pub mod perturb;
pub mod pipeline;
pub mod uq;

// Rasters appear in the public perturbation API.
pub use image;
