//! Mixture of LoRA experts with a contrastive expert-specialization loss.
//!
//! * [`autograd`]: small reverse-mode tensor engine used throughout.
//! * [`adapters`]: LoRA experts, top-k router, MoE-LoRA layer.
//! * [`contrastive`]: activated-vs-inactivated expert contrastive loss.
//! * [`migap`]: exact mutual information and the InfoNCE bound check.
//! * [`trainer`]: synthetic tasks, the adapted toy model, the training loop.
//! * [`diagnostics`]: expert workload, divergence and similarity analysis.

pub mod adapters;
pub mod autograd;
pub mod contrastive;
pub mod diagnostics;
pub mod migap;
pub mod trainer;

/// RNG used for every seeded stream in the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub use adapters::{AdapterError, LoraExpert, MoeLoraLayer, Router, RoutingDecision};
pub use autograd::{Tensor, TensorError};
pub use contrastive::{ContrastiveConfig, LossBreakdown, LossVariant};
pub use migap::{DiscreteJoint, GapScenario};
pub use trainer::{Dataset, SyntheticTaskSpec, TrainConfig, TrainError};
