//! Desk-scale segmentation stack: a reverse-mode autodiff engine, a
//! residual + state-space encoder/decoder, uncertainty-weighted multi-loss
//! training with sharpness-aware minimization, and a synthetic cardiac-style
//! dataset.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod segnet;
pub mod tensor;

pub use error::{Error, Result};
pub use maps::{LabelMask, ProbMap};
pub use params::ParamSet;
pub use tensor::Tensor;
