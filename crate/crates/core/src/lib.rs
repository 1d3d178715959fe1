//! Weakly-supervised segmentation trained from image-level labels only.
//!
//! A localizer predicts a soft foreground mask; a classifier must be confident
//! on the foreground composite and maximally uncertain on the background
//! composite, while log-barrier size terms keep both regions non-empty.

pub mod autodiff;
pub mod datagen;
mod error;
pub mod evaluation;
pub mod masking;
pub mod models;
pub mod objectives;
pub mod pgm;
pub mod trainer;

pub use error::{Error, Result};
