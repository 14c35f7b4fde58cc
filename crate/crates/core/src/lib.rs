//! Cross-view video geo-localization, desk scale.
//!
//! The pipeline localizes a street-view video against aerial imagery in two
//! hierarchical stages: the whole video is first matched to a large aerial
//! region, then every frame is matched to a small aerial tile inside it, and
//! the per-frame candidates are decoded into a temporally consistent GPS
//! trajectory. Everything runs on a from-scratch f32 tensor library with
//! reverse-mode autodiff, so training and inference are fully reproducible
//! from a seed.

pub mod adapter;
pub mod consistent;
pub mod encoder;
pub mod error;
pub mod geodata;
pub mod gradcheck;
pub mod plot;
pub mod retrieval;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
