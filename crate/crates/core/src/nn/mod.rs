//! Dense layers, graph attention, gated attention pooling, losses and Adam,
//! each with an analytic backward pass.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod matrix;
pub mod optim;
pub mod param;

pub use gradcheck::{grad_check, Differentiable, GradCheckReport};
pub use layers::{
    gat_backward, gat_layer, gated_attention_pool, gated_attention_pool_backward, linear, linear_backward, relu,
    relu_backward, sigmoid, GatCache, PoolOutput,
};
pub use loss::{bce_with_logits, cox_partial_likelihood_loss, LossGrad};
pub use matrix::DenseMatrix;
pub use optim::{AdamConfig, AdamState, CosineSchedule};
pub use param::{ParamTensor, Parameterized};
