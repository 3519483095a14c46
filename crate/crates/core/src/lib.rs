//! Spatio-temporal traffic forecasting with attention and a selective
//! state-space scan, plus the training, profiling and verification
//! machinery around it.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod duality;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod mamba;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod profiler;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use model::{count_params, Model, ModelConfig};
pub use tensor::Tensor;
