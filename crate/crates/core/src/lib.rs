//! LeanVAE: a lightweight causal video autoencoder built on Haar wavelet
//! patches, neighborhood-aware feedforward blocks and a compressed-sensing
//! channel bottleneck.

pub mod autograd;
pub mod backbone;
pub mod bottleneck;
pub mod error;
pub mod lvid;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod patchifier;
pub mod selftest;
pub mod tensor;
pub mod tiling;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
