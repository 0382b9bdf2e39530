//! Partial time-series classification with 1D convolutional networks.
//!
//! Series of varying length and start timestamp are placed on a common
//! zero-padded time axis. Every layer tracks the frame range computed purely
//! from real data, so pooling and normalisation ignore the padding. On top of
//! that the crate provides a learnable timestamp encoding and adaptive
//! multi-scale pooling, which keeps only the blocks whose receptive field fits
//! inside the input and aggregates them with an LSTM.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod layers;
pub mod model;
pub mod params;
pub mod rf;
pub mod scalar;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use heads::{HeadConfig, HeadVariant};
pub use layers::BlockSpec;
pub use model::{build_model, LengthPolicy, Model, ModelConfig, PredictionOutput, TeConfig};
pub use params::{Forward, Mode, ParamStore};
pub use rf::{LayerGeom, RfEntry, RfReport, ValidInterval};
pub use scalar::Scalar;
pub use tensor::{Checkpoint, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
