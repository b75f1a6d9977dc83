//! Warm-started diffusion posterior sampling for degraded images.
//!
//! A conditional model gives a first reconstruction, a memory bank of
//! reference data log-likelihoods picks how far into the reverse diffusion
//! to start, and each reverse step is followed by a strong-Wolfe line-searched
//! data-consistency update. The learned score is replaced by the exact score
//! of a Gaussian-mixture prior so every stage can be checked against
//! closed-form oracles.

pub mod cli;
pub mod conditional;
pub mod consistency;
pub mod dcats;
pub mod degradation;
pub mod diffusion;
pub mod error;
pub mod filter;
pub mod fingerprint;
pub mod image;
pub mod io;
pub mod linesearch;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};
pub use image::{Image, LabelMap};
