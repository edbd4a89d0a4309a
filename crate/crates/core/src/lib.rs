//! Feature-map transformer blocks and their flattened-token baseline.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`rng`], [`tape`] and [`gradcheck`]: dense f64 kernels, a
//!   seeded counter-based random source, a reverse-mode tape and a central
//!   finite-difference checker.
//! * [`blocks`]: the vanilla transformer block over `[n, d]` tokens and the
//!   FeatER block over intact `[n, h, w]` feature maps, plus stacks and
//!   checkpoints.
//! * [`costmodel`]: closed-form MAC/parameter counts and the instrumented
//!   counter that must agree with them exactly.
//! * [`reconstruct`]: whole-channel masking and the reconstruction loss.
//! * [`synthtask`]: Gaussian heatmaps, losses, argmax decoding and a small
//!   heatmap-refinement training loop.

pub mod blocks;
pub mod costmodel;
pub mod error;
pub mod gradcheck;
pub mod reconstruct;
pub mod rng;
pub mod synthtask;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
