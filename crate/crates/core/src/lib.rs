//! Patch-wise, layer-invariant dynamic quantization for super-resolution
//! inference.
//!
//! An LR image is tiled into patches. A small gating network (the
//! granularity-bit controller, [`gbc`]) picks an activation bit-width for
//! each patch from a candidate list, and patches that land on the highest
//! candidate are refined by an entropy-to-bit mapping ([`e2b`]) driven by
//! corpus entropy statistics ([`entropy`]). Every quantized layer of the
//! reference network ([`srnet`]) then runs at the patch's single bit-width.
//!
//! All numeric code is generic over [`Scalar`]; [`Tensor32`] and
//! [`Tensor64`] are the usual concrete instantiations.

pub mod container;
pub mod conv;
pub mod e2b;
pub mod entropy;
pub mod error;
pub mod gbc;
pub mod image_io;
pub mod metrics;
pub mod patch;
pub mod plan;
pub mod quant;
pub mod scalar;
pub mod srnet;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use plan::{BitCode, PatchPlan};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision tensor, the storage type of images and model files.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used where exact lattice checks matter.
pub type Tensor64 = Tensor<f64>;

pub type QuantModel32 = srnet::QuantModel<f32>;
pub type QuantModel64 = srnet::QuantModel<f64>;
pub type GbcModel32 = gbc::GbcModel<f32>;
pub type GbcModel64 = gbc::GbcModel<f64>;
