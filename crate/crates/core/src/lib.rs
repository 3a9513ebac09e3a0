//! Spatio-temporal unitized forecasting engine.
//!
//! A backbone extractor produces a global forecast while a stack of
//! multi-layer residual fusion blocks, built from low-rank adaptive
//! spatio-temporal cells, refines it; a learned scalar gate blends the two.

#![allow(clippy::needless_range_loop)]

pub mod astuc;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gate;
pub mod gradcheck;
pub mod lowrank;
pub mod mlrf;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Result, StumError};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::{Tape, Tensor, Var};
