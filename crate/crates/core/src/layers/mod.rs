//! Differentiable building blocks shared by both networks.

pub mod conv;
pub mod norm;

pub use conv::{ConvCache, ConvShape, Geometry};
pub use norm::{BatchNorm, BnMode, NormCache};
