//! Patch position encodings for plain vision transformers.
//!
//! The centerpiece is the LookHere family of fixed attention biases: each
//! head gets a direction and a field of view, keys outside the view are
//! masked, and visible keys are penalized in proportion to their Euclidean
//! patch distance. Around it sit the usual baselines (learned, sinusoidal,
//! factorized and Fourier position embeddings, learned relative biases,
//! 2D-ALiBi, 2D rotary embeddings), a small reference transformer with
//! hand-written gradients, resolution-change adapters, and attention
//! diagnostics.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases at the
//! crate root pin the common instantiations.

pub mod grid;
pub mod scalar;

mod error;
mod interp;
mod ops;
mod rng;

pub mod analysis;
pub mod attention;
pub mod bias_field;
pub mod demo;
pub mod extrapolate;
pub mod io;
pub mod pos_embed;
pub mod rope;

pub use error::{Error, Result};
pub use grid::{patchify, unpatchify, ModelDims, PatchGrid, CLS_INDEX};
pub use scalar::Real;

pub type BiasField32 = bias_field::BiasField<f32>;
pub type BiasField64 = bias_field::BiasField<f64>;
pub type EmbeddingTable32 = pos_embed::EmbeddingTable<f32>;
pub type EmbeddingTable64 = pos_embed::EmbeddingTable<f64>;
pub type Rotary32 = rope::Rotary<f32>;
pub type Rotary64 = rope::Rotary<f64>;
pub type TinyViT32 = attention::TinyViTParams<f32>;
pub type TinyViT64 = attention::TinyViTParams<f64>;
