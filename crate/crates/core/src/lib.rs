//! Semantic-enhanced heterogeneous graph network for flexible object
//! recognition: adaptive MST-ordered scanning, a ZOH-discretized state-space
//! encoder, cross-modal correlation learning, adaptive top-k heterogeneous
//! graph construction, and stacked graph reasoning, on a minimal
//! reverse-mode autodiff tensor core.

pub mod error;
pub mod gradcheck;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
