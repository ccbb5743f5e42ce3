//! Dense f64 kernels with analytic backward passes.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_with_step, relative_error, CoordError, GradCheckReport, FD_STEP,
    MAX_COORDS_PER_TENSOR, REL_ERR_FLOOR,
};
pub use kernels::{gelu, l2_normalize, layer_norm, sigmoid, LAYER_NORM_EPS};
pub use tape::{GradTape, Gradients, ParamVars, Var};
pub use tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("tensor rank must be 1 or 2, got {0}")]
    BadRank(usize),
    #[error("tensor dims must be positive, got {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite gradient for `{param}`[{index}]")]
    NonFiniteGradient { param: String, index: usize },
}
