//! Multimodal fusion-restoration anomaly detection.
//!
//! A shared encoder fuses per-pixel 2D (image) and 3D (point cloud) features into one
//! latent embedding; two decoders restore each modality from it. Trained on normal samples
//! only, the restoration error localizes anomalies.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anomaly;
pub mod error;
pub mod evaluation;
pub mod feature_store;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod scalar;
pub mod seed;
pub mod training;

pub use error::{MafrError, Result};
pub use scalar::Scalar;
