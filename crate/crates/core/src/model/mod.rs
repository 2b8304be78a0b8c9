//! Toy sparse mixture-of-experts network with per-expert LoRA adapters.

mod activation;
mod lora;
mod smoe;
mod toy;

use serde::{Deserialize, Serialize};

pub use activation::{record_activations, ActivationCounter, CountingMode};
pub use lora::{LoraPair, DEFAULT_LORA_ALPHA, LORA_INIT_STD};
pub use smoe::{route, route_from_logits, smoe_forward, GateNormalization, RoutingDecision, SmoeLayer};
pub use toy::{
    argmax, loss_and_grads, EvalMetrics, Gradients, LoraGrad, LossOutput, ModelSpec, Sample, Target,
    TaskKind, ToyModel,
};

/// How a client's SMoE output is rescaled when it runs with fewer experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescalerMode {
    /// Trained scalar, initialized to 1.
    #[default]
    Learnable,
    /// Fixed `k_full / k_i`.
    StaticKOverKi,
    /// Fixed 1.
    None,
}

impl RescalerMode {
    /// Starting value for a client running `k_i` of `k_full` experts.
    pub fn initial_value(self, k_full: usize, k_i: usize) -> f64 {
        match self {
            RescalerMode::StaticKOverKi => k_full as f64 / k_i as f64,
            RescalerMode::Learnable | RescalerMode::None => 1.0,
        }
    }

    pub fn is_trainable(self) -> bool {
        matches!(self, RescalerMode::Learnable)
    }
}
