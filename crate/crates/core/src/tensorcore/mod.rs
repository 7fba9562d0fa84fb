//! Dense tensors, reverse-mode differentiation, parameters and layers.

pub mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

pub use layers::{
    apply_layer_norm, apply_linear, heads_for, linear, register_attention, register_layer_norm,
    register_linear, self_attention, Attended, AttentionWeights, LAYER_NORM_EPS,
};
pub use params::{Adam, Init, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
