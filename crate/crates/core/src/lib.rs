//! Multi-modal 3D CNN classification framework: single-modality and fused
//! (early / middle / late) residual networks over paired PET/MRI volumes,
//! with randomized-pairing evaluation, integrated-gradients attribution, and
//! a synthetic paired-volume generator.

pub mod attribution;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod nn;
pub mod report;
pub mod seed;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
