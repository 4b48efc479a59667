//! Structured filter pruning for residual CNNs.
//!
//! The crate bundles a small reverse-mode tensor core, configurable-depth
//! ResNet builders, hard and asymptotic soft filter pruning with
//! skip-aware alignment and compaction, parameter/FLOP accounting, a
//! synthetic grayscale defect-image generator with k-fold splitting, and
//! the experiment harness that ties them together.

pub mod accounting;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod optim;
pub mod prune;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::Tensor;
