//! Numerical core: tensors, boundary guidance, boundary-modulated selective
//! scans over images, bounded grouped channel scans and segmentation metrics.
//!
//! All kernels are generic over [`Real`] (f32 at runtime, f64 for gradient
//! checks) and carry hand-written backward passes.

pub mod basm;
pub mod cmsa;
pub mod edt;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod params;
pub mod posterior;
pub mod real;
pub mod scan;
pub mod tensor;
pub mod tnsr;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use params::Parameterized;
pub use real::Real;
pub use tensor::Tensor;

/// Source of standard-normal draws used to initialise weights.
pub type Init<'a> = &'a mut dyn FnMut() -> f64;
