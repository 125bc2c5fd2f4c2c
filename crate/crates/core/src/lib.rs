//! Music-to-conducting-gesture pipeline: audio descriptors, an autodiff
//! engine, transformer generator and retrieval models, training loops,
//! quality control, and evaluation metrics.

pub mod audio;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pose;
pub mod retrieval;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
