//! Multiscale inception encoder-decoder for blind Gaussian denoising.
//!
//! The crate is self-contained: a dense [`Tensor`] type with a tape-based
//! reverse-mode differentiator ([`autodiff`]), convolution layers
//! ([`layers`]), the encoder-decoder network ([`model`]), AWGN dataset
//! tooling ([`data`]), quality metrics ([`metrics`]) and the Adam training
//! loop with a finite-difference gradient checker ([`train`]).
//!
//! Inner loops of the convolution kernels run on rayon when the `parallel`
//! feature is enabled (the default). Work is split only across independent
//! output planes, so results are bit-identical to the sequential build.

pub mod autodiff;
pub mod data;
mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod rng;
mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
