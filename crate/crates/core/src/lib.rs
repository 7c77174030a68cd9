//! DCT-basis ("harmonic") convolution blocks and the tooling around them:
//! a small tensor engine, DCT filter banks, lapped-transform identities,
//! dataset loaders, a deterministic training harness and experiment drivers.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dct;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod harmonic;
pub mod lapped;
pub mod model;
pub mod ops;
pub mod optim;
pub mod par;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
