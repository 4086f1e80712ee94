//! Channel-spatial attention vision transformer (CSVT) with local-to-global
//! self-distillation, on top of a small reverse-mode autodiff engine.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

#![allow(clippy::type_complexity)]

pub mod augment;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod imageops;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod ssl;
pub mod tape;
pub mod tensor;
#[cfg(any(test, feature = "testing"))]
pub mod testing;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use model::{CsvtConfig, CsvtModel, Mode};
pub use params::ParamSet;
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type CsvtModel32 = CsvtModel<f32>;
pub type CsvtModel64 = CsvtModel<f64>;
