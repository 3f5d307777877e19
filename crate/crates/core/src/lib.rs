//! Fundus image enhancement core: a reproducible degradation model, quality
//! metrics, a small reverse-mode autodiff engine, the two-stage
//! multi-attention enhancement network with its structure-preservation
//! segmenter, the loss stack, and the mean-teacher training step.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, manifests and
//! the command line live in the companion `tmage` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod degrade;
pub mod error;
pub mod image;
pub mod losses;
pub mod magenet;
pub mod meanteacher;
pub mod metrics;
pub mod rng;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use image::{FundusImage, Mask};
