//! Segmentation of large diffuse contaminants with multi-scale gridded attention,
//! Gabor (orientation-axis) attention and a super-majority consensus loss.
//!
//! Everything runs on a small `f64` reverse-mode autograd engine ([`autograd`]) so that
//! every operator can be checked against finite differences.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autograd;
pub mod container;
pub mod error;
pub mod gabor;
pub mod gradcheck;
pub mod gridded;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
