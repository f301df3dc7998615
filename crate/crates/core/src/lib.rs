//! Stage-wise prompt-matched tuning of frozen segmentation backbones.
//!
//! A frozen, stage-partitioned backbone is adapted to a downstream
//! segmentation task by inserting small trainable prompt matchers between
//! its stages. Each matcher refines an interim semantic map and uses it to
//! produce a multiplicative feature prompt, recurrently with shared weights.

pub mod data;
pub mod error;
pub mod experiments;
pub mod backbone;
pub mod framework;
pub mod gradsuite;
pub mod numerics;
pub mod spm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
