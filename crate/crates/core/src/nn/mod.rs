//! Small differentiable function-approximation core: dense tensors, a
//! recording tape, MLPs and first-order optimizers.

mod mlp;
mod optim;
mod tape;
mod tensor;

pub use mlp::{Activation, Init, MlpParams, MlpVars};
pub use optim::{OptimizerConfig, OptimizerState, UpdateRule};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
