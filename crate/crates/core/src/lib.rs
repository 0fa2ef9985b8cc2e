//! Hybrid attention/convolution domain adaptation on synthetic two-domain
//! image data.

pub mod autodiff;
pub mod data;
pub mod ecb;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
