//! Dense-tensor reverse-mode automatic differentiation and the learned
//! kernels built on it.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use nn::{
    graph_transformer_forward, mlp_forward, skip_aggregate, Activation, EdgeSet,
    GraphTransformerIds, GraphTransformerParams, MlpIds, MlpParams,
};
pub use optim::{clip_global_norm, AdamConfig, AdamState};
pub use tape::{AdError, RowMapPlan, Tape, TensorId};
pub use tensor::Tensor;
