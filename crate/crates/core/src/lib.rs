//! Single-stage face swapping at desk scale: face alignment and pair
//! sampling, a U-Net generator with gated skip fusion, a residual critic,
//! the training objectives, backbone feature-distance calibration and the
//! evaluation metrics.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common types to one precision.

pub mod archive;
pub mod backbone;
pub mod calibration;
pub mod config;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod face;
pub mod generator;
pub mod objectives;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
pub use face::{AlignedFace, RawImage};
pub use gradtape::{Scalar, Tensor, Var};

pub type AlignedFace32 = AlignedFace<f32>;
pub type AlignedFace64 = AlignedFace<f64>;
pub type FaceStore32 = pipeline::FaceStore<f32>;
pub type FaceStore64 = pipeline::FaceStore<f64>;
pub type Backbone32 = backbone::BackboneAdapter<f32>;
pub type Backbone64 = backbone::BackboneAdapter<f64>;
pub type Generator32 = generator::Generator<f32>;
pub type Generator64 = generator::Generator<f64>;
pub type Discriminator32 = discriminator::Discriminator<f32>;
pub type Discriminator64 = discriminator::Discriminator<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
