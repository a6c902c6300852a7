//! Dense tensor math and a restricted reverse-mode differentiation tape.

mod ops;
mod real;
mod rng;
mod tape;
mod tensor;

pub use ops::{
    dot, gelu, gelu_grad, layernorm_forward, matmul, matmul_nt, matmul_tn,
    rmsnorm_forward, softmax, softmax_rows,
};
pub use real::Real;
pub use rng::Rng;
pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;
pub(crate) use ops::{attention_forward, channel_mean_var};
pub(crate) use tape::log_softmax;
