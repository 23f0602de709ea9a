//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive as it is applied; [`Graph::backward`]
//! then walks the record once in reverse. Parameters enter as leaves,
//! data as constants.

mod check;
mod graph;
mod tensor;

pub use check::{
    compare_with_central_differences, forward_backward, gradient_check, rel_err, GradCheckReport,
    InputCheck, REL_ERR_FLOOR,
};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;
