//! Ordinal label encodings for age estimation.
//!
//! The crate provides the three encodings (LDL, Hard-ranking, Soft-ranking)
//! with their losses and analytic gradients, Maskout auxiliary branches over
//! a small hand-differentiated network, a momentum-SGD trainer, synthetic
//! multi-image subjects with random and subject-exclusive splits, and the
//! benchmark suites that compare encodings and regularizers on them.

pub mod benchmark;
pub mod encoding;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod maskout;
pub mod metrics;
pub mod model;
pub mod special;
pub mod synth;
pub mod trainer;

pub use encoding::{AgeLabel, EncodedTarget, EncodingConfig, Family};
pub use error::{Error, Result};
pub use maskout::{FeatureMap, Mask};
pub use model::{ModelDims, ModelParams};
