//! Vertebral fracture grading in the semantic latent space of a diffusion
//! autoencoder.
//!
//! The pipeline has three stages:
//!
//! 1. [`model`]: train a diffusion autoencoder (semantic encoder plus a
//!    conditional DDIM denoiser) on unlabeled images.
//! 2. [`latentgeom`]: fit a linear probe (logistic or SVM) on the frozen
//!    semantic latents of healthy vs. G2/G3 samples and extract its decision
//!    hyperplane.
//! 3. [`grading`]: calibrate the signed distance to that hyperplane to a
//!    continuous Genant grade; [`editing`] inverts the calibration to render
//!    counterfactual images at a requested grade.
//!
//! [`synth`] generates a procedural dataset with known compression so every
//! stage can be checked against ground truth, and [`metrics`] holds the
//! evaluation measures.

pub mod diffusion;
pub mod editing;
pub mod error;
pub mod exec;
pub mod grading;
pub mod latentgeom;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;

pub use error::{Error, Result};
pub use exec::Exec;
