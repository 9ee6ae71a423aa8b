//! Modality-adaptive bi-temporal change detection.
//!
//! The network routes every pixel through one of two receptive-field
//! experts and one of three difference primitives, with hard decisions
//! in the forward pass and straight-through gradients in the backward
//! pass. Everything runs on the small `f64` autodiff engine in
//! [`tensor`].

pub mod casd;
pub mod error;
pub mod experts;
pub mod harness;
pub mod model;
pub mod normalization;
pub mod params;
pub mod rng;
pub mod routing;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use params::DomainId;
