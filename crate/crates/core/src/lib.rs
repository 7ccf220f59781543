//! Visual and semantic prompt collaboration for generalized zero-shot
//! learning, at desk scale.
//!
//! The crate is self-contained: a small `f64` tensor type, a reverse-mode
//! autodiff tape, a ViT-style backbone with visual/semantic prompt tokens,
//! the prompt fusion mechanisms, the training objective, AdamW training and
//! GZSL evaluation on a synthetic attribute-rendered dataset.

pub mod ablation;
pub mod attributes;
pub mod autodiff;
pub mod backbone;
pub(crate) mod binio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
