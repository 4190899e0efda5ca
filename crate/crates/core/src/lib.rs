//! Core numerics for representation-flow action recognition.
//!
//! The crate is organised around a small dense [`Tensor`](tensor::Tensor)
//! substrate and builds up to a complete (desk-scale) two-stream video
//! classifier:
//!
//! * [`tensor`] — shapes, elementwise algebra, 2-D cross-correlation with
//!   zero padding, axis reductions.
//! * [`autodiff`] — a minimal tape for reverse-mode gradients through every
//!   operation in the crate.
//! * [`gradcheck`] — central finite differences, the independent oracle every
//!   analytic gradient is validated against.
//! * [`flow`] — the representation-flow layer: an unrolled TV-L1 primal–dual
//!   solver over feature maps with trainable kernels and step sizes.
//! * [`attention`] — class activation maps and spatial softmax attention.
//! * [`convlstm`] — a convolutional LSTM for temporal aggregation.
//! * [`model`] — tiny backbone, the two streams, decision fusion, training,
//!   the synthetic motion dataset and the ablation harness.
//! * [`checkpoint`] — the versioned binary parameter container.
//!
//! All computation is `f64`, deterministic, and single threaded; identical
//! inputs produce bit-identical outputs. The crate is `no_std`-compatible
//! (`alloc` required): disable the `std` feature and enable `libm`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("repflow-core needs either the `std` feature or the `libm` feature");

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod convlstm;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub(crate) mod math;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{conv2d, Kernel2D, Tensor};
