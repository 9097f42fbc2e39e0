//! Residual-network classifier for grayscale ultrasound images.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode differentiation and a
//!   finite-difference gradient checker.
//! - [`model`]: the four-stage residual network, stage freezing and the
//!   portable weights file.
//! - [`data`]: BMP decoding, preprocessing, keyed augmentation and
//!   subject-grouped stratified splitting.
//! - [`train`]: cross-entropy loss, Adam, and the early-stopping training loop.
//! - [`metrics`]: confusion counts, point metrics, ROC and AUC.
//! - [`explain`]: Grad-CAM heatmaps and overlay rendering.
//! - [`suite`]: the gradient-check table run by the `gradcheck` command.

pub mod data;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
