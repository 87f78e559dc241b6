//! Multi-image super-resolution for PROBA-V style satellite scenes.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`autodiff`] and [`ops`]: dense tensors, a reverse-mode tape
//!   and the differentiable primitives (convolution, attention, FFT, ...).
//! * [`model`]: the per-frame convolution/attention encoder, the
//!   message-token fusion transformer and the Fourier-convolution decoder.
//! * [`data`], [`metrics`], [`train`]: scene ingestion and synthesis,
//!   shift/bias-corrected quality metrics, and the training loop.
//! * [`verify`]: finite-difference gradient checks and brute-force oracles.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod real;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{ComplexTensor, Tensor};
