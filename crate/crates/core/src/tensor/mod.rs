//! Reverse-mode differentiable tensor engine.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod value;

pub use adam::{adam_step, AdamState, DEFAULT_LR};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Hyper,
};
pub use gradcheck::{grad_check, grad_check_sampled, DEFAULT_STEP};
pub use graph::{sigmoid, Activation, Graph, LossKind, Op, Var, DICE_EPS, PROB_CLAMP};
pub use kernels::Conv2dSpec;
pub use params::{ParamId, ParamStore, Session};
pub use value::Tensor;
