//! Single-clip video frame prediction with a dual network.
//!
//! A convolutional encoder-decoder (the *transformer*) predicts the next
//! frame from a few context frames; a second network (the *selector*) looks
//! at temporal difference images and emits per-channel weights that scale
//! the transformer's decoder feature maps. Both are trained end to end on a
//! single short clip and then rolled out recursively.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root name the common instantiations.

pub mod alpha;
pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod predictor;
pub mod scalar;
pub mod selector;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod transformer;
pub mod video_io;

pub use alpha::AlphaMatrix;
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use layers::BnMode;
pub use model::{DualGrads, DualNet};
pub use params::ParamSet;
pub use scalar::Scalar;
pub use selector::SelectorConfig;
pub use tensor::{Batch, Frame};
pub use trainer::{TrainConfig, TrainState};
pub use transformer::{DecomposeMode, TransformerConfig};
pub use video_io::Clip;

pub type Frame32 = Frame<f32>;
pub type Frame64 = Frame<f64>;
pub type DualNet32 = DualNet<f32>;
pub type DualNet64 = DualNet<f64>;
pub type Alpha32 = AlphaMatrix<f32>;
pub type Alpha64 = AlphaMatrix<f64>;
pub type Clip32 = Clip<f32>;
pub type Clip64 = Clip<f64>;
