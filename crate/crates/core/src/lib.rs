//! Compressing image-to-image GANs by online multi-teacher distillation.

pub mod checkpoint;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod netzoo;
pub mod nn;
pub mod optim;
pub mod profiler;
pub mod trainer;

pub use error::{Error, Result};
