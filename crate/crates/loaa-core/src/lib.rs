//! Core library for `loaa`: a dense-tensor reverse-mode autodiff engine, a
//! log-mel spectrogram frontend with deterministic signal synthesis, a
//! ViT-style encoder over time-frequency token grids, and parallel bottleneck
//! adapters whose projections are 1D convolutions along the time or frequency
//! axis of the grid.
//!
//! The crate is `no_std`-compatible (requires `alloc`); all file IO, the CLI,
//! and the on-disk formats live in the companion `loaa` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adapters;
pub mod checkpoint;
pub mod dsp;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use graph::{Graph, Var};
pub use tensor::{Dtype, Element, Tensor};
