// SPDX-License-Identifier: MIT OR Apache-2.0

//! Runs the guide's code listings as doctests, one module per chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../../book/src/instrument.md")]
pub mod instrument {}

#[doc = include_str!("../../../book/src/detect.md")]
pub mod detect {}

#[doc = include_str!("../../../book/src/uq.md")]
pub mod uq {}

#[doc = include_str!("../../../book/src/eval.md")]
pub mod eval {}

#[doc = include_str!("../../../book/src/workbench.md")]
pub mod workbench {}
