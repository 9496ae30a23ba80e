//! Reverse-engineering generative models from the images they produce.
//!
//! A fingerprint estimation network (FEN) maps an image to a low-magnitude,
//! high-frequency residual shaped by four frequency-domain constraints. A
//! parsing network (PN) reads that fingerprint and predicts the generating
//! model's architecture hyperparameters and training-loss types. A zoo of
//! small procedurally-trained generators supplies exact ground truth.

// Indexed loops over parallel label tables read better than zipped iterators.
#![allow(clippy::needless_range_loop, clippy::type_complexity)]

pub mod apps;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fingerprint;
pub mod labels;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod parser;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
