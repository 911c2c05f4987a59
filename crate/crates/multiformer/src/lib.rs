//! Depth-aware video panoptic segmentation with a transformer query decoder.
//!
//! The crate is organized bottom-up: a small reverse-mode autodiff engine
//! over `ndarray` ([`tensor`]), neural building blocks ([`nn`]), the model
//! itself ([`features`], [`decoder`], [`heads`], [`model`]), and the
//! surrounding machinery for data, training, evaluation, and tracking.

pub mod assignment;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
