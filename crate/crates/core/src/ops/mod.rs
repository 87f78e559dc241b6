//! Differentiable primitives. Each op is a method on [`Var`](crate::autodiff::Var)
//! and, where oracles or inference need it, a plain-tensor function.

pub mod attention;
pub mod conv;
pub mod elementwise;
pub mod fft;
pub mod linalg;
pub mod norm;
pub mod shape;

pub use attention::{attention_tensor, BiasLayout, RelativeLayout, TokenPos};
pub use conv::conv2d_tensor;
pub use fft::{fft2, fft2_real, ifft2, FftPlan};
pub use norm::BatchStats;
pub use shape::{pixel_shuffle_tensor, pixel_unshuffle_tensor};
