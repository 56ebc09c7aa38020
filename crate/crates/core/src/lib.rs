//! Unpaired SAR-to-optical image translation with segmentation-guided
//! training, plus the dataset pipeline and evaluation harness.

pub mod archive;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod models;
pub mod optim;

pub use error::{CoreError, Result};
