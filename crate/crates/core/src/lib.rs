//! Conditional adversarial synthesis of CT volumes: volume I/O and
//! preprocessing, a small reverse-mode autodiff engine, the 3D generator and
//! discriminator, degradation and augmentation, metrics and synthetic data.

pub mod autodiff;
pub mod blindtest;
pub mod cgan;
pub mod degrade;
pub mod error;
pub mod metrics;
pub mod seed;
pub mod synth;
pub mod verify;
pub mod volume;

pub use error::{Error, Result};
