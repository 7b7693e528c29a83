//! Diffusion-policy behavioral cloning with a crossway state decoder.
//!
//! Action sequences are generated by iterative denoising with a FiLM
//! conditioned 1D U-Net. During training a state decoder reads the U-Net's
//! deepest representation (the "intersection") and reconstructs the input
//! observations; its loss is added to the usual noise-prediction loss.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod nn;
pub mod objectives;
pub mod perception;
pub mod reconstruction;
pub mod rollout;
pub mod data;
pub mod denoiser;
pub mod schedule;

pub use error::{Error, Result};
