//! Locate-then-edit parameter editing on a small decoder-only transformer.
//!
//! The crate is `no_std` + `alloc`. It holds every numeric piece of the
//! pipeline: a reverse-mode tape, the toy transformer with hidden-state
//! hooks, target construction (gradient solve, backward spreading, forward
//! replay, BLUE, OneLayer), the closed-form multi-layer editor, Jacobian
//! diagnostics and the evaluation metrics. File formats and the CLI live in
//! the `fwdedit` companion crate.
//!
//! Enable the `parallel` feature to solve per-request targets on a rayon
//! pool; results are identical to the sequential path.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod diagnostics;
pub mod editor;
pub mod error;
pub mod evaluation;
pub mod math;
pub mod model;
pub mod targets;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
