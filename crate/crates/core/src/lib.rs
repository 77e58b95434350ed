//! Multi-scale attention towers for early action prediction.
//!
//! A clip observed up to ratio `ρ` is cut into progressively longer
//! temporal scales. A shared 3-D convolutional encoder turns each scale
//! into a pooled feature grid, one latent-bottleneck attention tower per
//! scale produces a class distribution, and the distributions are merged by
//! a learned blend of agreement-based and confidence-based weighting.
//!
//! Everything runs on a small f64 reverse-mode autodiff core ([`numkit`]).

pub mod aggregate;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod model;
pub mod numkit;
pub mod scales;
pub mod tower;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ModelConfig, TemprModel};
