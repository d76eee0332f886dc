//! Differentiable full-reference image quality metrics (multi-scale VIF, a
//! Haar-based detail-loss metric, motion, linear fusion) together with the
//! machinery that exploits their gradients: norm-bounded adversarial
//! perturbations, metric-driven image recovery, and tools for characterizing
//! the resulting perturbations.

pub mod analysis;
pub mod attack;
pub mod autodiff;
pub mod baseline;
pub mod error;
pub mod image;
pub mod metrics;
pub mod restore;
pub mod synth;

pub use error::{Error, Result};
pub use image::{Dataset, ImagePlane};
