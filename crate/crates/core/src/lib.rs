//! Composer laboratory: instance-specific low-rank weight updates for a frozen
//! toy diffusion transformer.

pub mod backbone;
pub mod bench;
pub mod composer;
pub mod composition;
pub mod data;
pub mod error;
pub mod nn;
pub mod numerics;
pub mod quant;

pub use error::{Error, Result};
pub use numerics::{Module, Param, SeededRng, Tape, Tensor, Var};
