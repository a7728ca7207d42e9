//! Single-layer selective SSM language model over a small alphabet.
//!
//! Per position `t` with embedding `x_t`:
//!
//! ```text
//! Δ_t = softplus(<w_Δ, x_t> + δ)          a_t = exp(-a Δ_t)
//! x̃_t = ReLU(conv_X(W_X x)) Δ_t    b_t = ReLU(conv_B(W_B x))    c_t = ReLU(conv_C(W_C x))
//! H_t = a_t H_{t-1} + x̃_t b_tᵀ      y_t = H_t c_t
//! z_t = y_t ⊙ ReLU(W_z x_t)          u_t = x_t + W_o z_t
//! v_t = u_t + W2 [ReLU(W1 u_t) ⊙ W3 u_t]
//! f(x_1^t) = softmax(W_ℓ v_t)
//! ```
//!
//! The zero variant drops the ReLUs, the gate and the MLP, and normalizes the
//! logits by their L1 norm.

mod config;
mod forward;
mod grad;
pub mod graph;
mod params;

pub use config::{Head, MambaConfig, MlpCombine, Variant, L1_FLOOR};
pub use forward::{
    forward_sequence, forward_step, selectivity, Diagnostics, Model, PredictionTrace, RecurrentState, Selectivity, StepOutput,
};
pub use grad::{batch_loss, batch_loss_grad, sequence_loss, sequence_loss_grad};
pub use params::{init_params, init_params_with, Checkpoint, InitScheme, MambaParams, Mlp, NamedArray, INIT_A, INIT_STD};
