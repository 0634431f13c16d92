// SPDX-License-Identifier: MIT OR Apache-2.0

//! Induction heads, entropy neurons and induction-gated uncertainty scores
//! on small instrumented transformers.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` kernels.
//! * [`model`]: a pre-norm decoder-only transformer with attention and MLP
//!   captures, plus hand-wired toy models.
//! * [`instrument`]: capture selection, mean ablation and boosts.
//! * [`detect`]: induction-head and entropy-neuron detectors.
//! * [`uq`]: token entropy, sink rate and the gated uncertainty score.
//! * [`eval`]: AUROC, rank tests, splits and the study drivers.
//! * [`trace`] and [`synth`]: generation traces, their file format and a
//!   labelled synthetic corpus.

pub mod detect;
pub mod error;
pub mod eval;
pub mod instrument;
mod io_util;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod trace;
pub mod uq;

pub use error::{Error, Result};
pub use io_util::write_atomic;
