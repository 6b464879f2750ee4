//! Conditional-GAN training with adversarial importance weighting and
//! multi-hop sample training on synthetic attribute-indexed domains.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod aiw;
pub mod eval;
pub mod models;
pub mod mst;
pub mod rng;
pub mod synthdata;
pub mod training;
pub mod verify;
