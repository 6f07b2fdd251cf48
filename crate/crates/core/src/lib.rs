//! Identity distilling and dispelling autoencoder.
//!
//! A shared convolutional encoder feeds two branches: one distils identity
//! into `f_T`, the other is adversarially trained to dispel identity from
//! `f_P` while a decoder reconstructs the image from both. Around the model
//! live the training objective with its gradient routing, a synthetic
//! factor-controlled dataset, analytics, latent editing, and checkpoints.

pub mod analytics;
pub mod autodiff;
pub mod data;
pub mod editing;
pub mod error;
pub mod model;
pub mod objective;
pub mod par;
pub mod persistence;
pub mod rng;

pub use error::{Error, Result};
