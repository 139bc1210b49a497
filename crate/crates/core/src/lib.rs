//! Patch-based 3D GAN toolkit for MRI/CBCT to CT synthesis.

pub mod augment;
pub mod discriminators;
pub mod error;
pub mod generator_genext;
pub mod inference_engine;
pub mod losses;
pub mod metrics;
pub mod preprocess;
pub mod seg_mask_provider;
pub mod trainer;
pub mod volume_store;

pub use error::{Error, ErrorKind, Result};
