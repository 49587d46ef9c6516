//! Few-shot segmentation from frozen foundation-model features.
//!
//! Query and support features are turned into per-layer 4D cosine
//! correlation volumes, optionally fused with a vision-language activation
//! channel, and decoded by a small center-pivot / depth-wise-separable 4D
//! convolution network into two-class logits.

pub mod autodiff;
pub mod decoder;
pub mod episodic;
pub mod error;
pub mod extraction;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
