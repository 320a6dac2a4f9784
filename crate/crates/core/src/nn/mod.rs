//! Minimal f64 tape autodiff substrate.
//!
//! Everything trainable in this crate is built from the primitives here:
//! an immutable [`Tensor`] handle whose op graph is retained only while a
//! gradient can flow, reverse-mode [`Tensor::backward`], a small layer zoo,
//! and a decoupled-weight-decay Adam optimizer. f64 end to end keeps the
//! finite-difference oracles tight and the runs bit-reproducible.

mod gradcheck;
mod layers;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{gradcheck_loss, GradCheckReport};
pub use layers::{
    causal_mask, CrossAttentionBlock, Embedding, LayerNorm, Linear, Mlp, MultiHeadAttention,
    TransformerBlock,
};
pub use optim::AdamW;
pub use params::{ParamSet, Var};
pub use tensor::{grad_enabled, no_grad, Gradients, Tensor};
