//! LoRA experts, the top-k router and the MoE-LoRA layer built from them.

mod expert;
mod layer;
mod router;

pub mod checkpoint;

use thiserror::Error;

use crate::autograd::TensorError;

pub use expert::{expert_forward, lora_forward, LoraExpert, LoraScaling};
pub use layer::{
    moe_forward, ExpertOutputs, ForwardMode, MoeLayerConfig, MoeLoraLayer, MoeOutput, RoutedOutput,
};
pub use router::{route, Router, RoutingDecision};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdapterError {
    #[error("rank {rank} too large for a {d_out}x{d_in} weight (need 1 <= r <= min(d_in, d_out) / 2)")]
    RankTooLarge {
        rank: usize,
        d_in: usize,
        d_out: usize,
    },
    #[error("top-k {k} out of range for {n} experts")]
    InvalidTopK { k: usize, n: usize },
    #[error("input shape {shape:?} does not match d_in = {expected}")]
    InputDimension { expected: usize, shape: Vec<usize> },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
