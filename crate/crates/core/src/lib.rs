//! Tape-based autodiff and the layers, augmentations, training loop and
//! post-training int8 quantization used to build small attention-augmented
//! image classifiers.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, datasets on
//! disk and the command line live in the `atnf` crate.
//!
//! Image tensors use the `[N, H, W, C]` layout (height before width).

#![no_std]
// `!(x >= 0.0)` rejects NaN; tensor ops named add/mul are fallible.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod augment;
mod error;
pub mod gradcheck;
mod kernels;
pub mod model;
pub mod params;
pub mod quant;
pub mod rng;
pub mod tape;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
