//! Low-complexity attention-based unsupervised anomalous sound detection.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod data;
pub mod dsp;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor, TensorError};
