//! Shortcut-mitigating augmentation on a synthetic biased benchmark.
//!
//! The crate bundles a small reverse-mode tensor engine, a shapes-on-textures
//! dataset generator with ground-truth masks, an attention-aggregating CNN
//! with object and background branches, the feature-shuffling training loop,
//! integrated-gradients shortcut metrics and CAM-based localization.

pub mod attribution;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod localization;
pub mod model;
pub mod par;
pub mod pnm;
pub mod sma;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Parameter, Tensor};
