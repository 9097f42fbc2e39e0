//! The four-stage residual classifier.
//!
//! Stem (7×7/2 conv, batch-norm, ReLU, 3×3/2 max pool), four stages of basic
//! or bottleneck residual blocks, global average pooling, a ReLU dense layer
//! with dropout and a single sigmoid output.

mod config;
mod network;
pub mod weights;

pub use config::{BlockKind, NetworkConfig, Stage};
pub use network::{dropout_mask, BnUpdate, Buffer, ForwardPass, Mode, Network, Param};
