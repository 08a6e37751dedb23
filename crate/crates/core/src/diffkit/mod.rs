//! Reverse-mode differentiation kernel, network cells and optimizers.

mod cells;
mod graph;
mod optim;
mod tensor;

pub use cells::{
    collect_grads, glorot, gru_step, mlp_forward, vrnn_step, Activation, BoundCell, BoundMlp,
    CellKind, Dense, Gru, Mlp, Parameterized, RecurrentCell, Vrnn, VRNN_INIT_EPS,
};
pub use graph::{Binary, Gradients, Graph, Unary, Var};
pub use optim::{
    clip_global_norm, global_norm, OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2,
    ADAM_EPS,
};
pub use tensor::Tensor;

