//! Dense tensors, reverse-mode autodiff, seeded randomness and AdamW.

mod alloc;
pub mod gradcheck;
mod optim;
mod param;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use alloc::AllocTracker;
pub use gradcheck::{
    finite_diff_check, finite_diff_check_many, finite_diff_check_module, primitive_suite, FdReport,
};
pub use optim::{AdamW, AdamWConfig};
pub use param::{Module, Param};
pub use rng::{fnv1a64, splitmix64, SeededRng};
pub use scalar::{DType, Scalar};
pub(crate) use tape::qmax;
pub use tape::{fake_quantize_tensor, Gradients, Mask, NodeId, Tape, Unary, Var};
pub use tensor::Tensor;
