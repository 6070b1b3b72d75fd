//! Masked contrastive reconstruction for paired images and reports.

pub mod alignment;
pub mod autograd;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod masking;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod preprocessing;
pub mod rng;
pub mod training;

pub use error::{McrError, Result};
