use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::lora::LoraPair;
use crate::numerics::{softmax, topk_indices, Matrix};

/// How gate values of the selected experts are formed from router probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateNormalization {
    /// Selected probabilities are rescaled to sum to one.
    #[default]
    Renormalize,
    /// Selected probabilities are used as-is.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Ascending expert indices.
    pub selected: Vec<usize>,
    pub gate_weights: Vec<f64>,
}

/// One sparse mixture-of-experts layer with per-expert LoRA adapters.
///
/// Expert weights are `out × in`; the router is `in × M` and scores the
/// layer input directly.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoeLayer {
    pub experts: Vec<Matrix>,
    pub router: Matrix,
    pub loras: Vec<LoraPair>,
    pub rescaler: f64,
    pub k_full: usize,
    pub gate_norm: GateNormalization,
}

/// Per-expert intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ExpertTrace {
    pub expert: usize,
    pub gate: f64,
    /// `b · x`
    pub projected: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct SmoeTrace {
    pub decision: RoutingDecision,
    pub experts: Vec<ExpertTrace>,
    /// Gate-weighted sum before the rescaler.
    pub mixture: Vec<f64>,
}

impl SmoeLayer {
    pub fn new(
        experts: Vec<Matrix>,
        router: Matrix,
        loras: Vec<LoraPair>,
        k_full: usize,
    ) -> Result<Self> {
        let m = experts.len();
        if m == 0 {
            return Err(Error::domain("an SMoE layer needs at least one expert"));
        }
        if loras.len() != m {
            return Err(Error::domain(format!(
                "{m} experts but {} LoRA pairs",
                loras.len()
            )));
        }
        if k_full == 0 || k_full > m {
            return Err(Error::Budget { k_i: k_full, k_full: m });
        }
        let shape = experts[0].shape();
        for (w, l) in experts.iter().zip(&loras) {
            if w.shape() != shape {
                return Err(Error::Dimension {
                    op: "SmoeLayer::new",
                    lhs: shape,
                    rhs: w.shape(),
                });
            }
            if (l.out_dim(), l.in_dim()) != shape {
                return Err(Error::Dimension {
                    op: "SmoeLayer::new (lora)",
                    lhs: shape,
                    rhs: (l.out_dim(), l.in_dim()),
                });
            }
        }
        if router.shape() != (shape.1, m) {
            return Err(Error::Dimension {
                op: "SmoeLayer::new (router)",
                lhs: (shape.1, m),
                rhs: router.shape(),
            });
        }
        Ok(Self {
            experts,
            router,
            loras,
            rescaler: 1.0,
            k_full,
            gate_norm: GateNormalization::Renormalize,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn in_dim(&self) -> usize {
        self.experts[0].cols()
    }

    pub fn out_dim(&self) -> usize {
        self.experts[0].rows()
    }

    pub fn check_budget(&self, k_i: usize) -> Result<()> {
        if k_i == 0 || k_i > self.k_full {
            return Err(Error::Budget {
                k_i,
                k_full: self.k_full,
            });
        }
        Ok(())
    }

    /// `TopK(softmax(routerᵀ x), k_i)`, gates normalized per [`GateNormalization`].
    pub fn route(&self, x: &[f64], k_i: usize) -> Result<RoutingDecision> {
        self.check_budget(k_i)?;
        let logits = self.router.matvec_t(x)?;
        route_from_logits(&logits, k_i, self.gate_norm)
    }

    /// `h = s · Σ_{j∈selected} g_j (W^j x + (α/r) A^j B^j x)`
    pub fn forward(&self, x: &[f64], k_i: usize) -> Result<(Vec<f64>, RoutingDecision)> {
        let trace = self.forward_traced(x, k_i)?;
        let h = trace.mixture.iter().map(|v| v * self.rescaler).collect();
        Ok((h, trace.decision))
    }

    pub(crate) fn forward_traced(&self, x: &[f64], k_i: usize) -> Result<SmoeTrace> {
        if x.len() != self.in_dim() {
            return Err(Error::Dimension {
                op: "smoe_forward",
                lhs: (self.out_dim(), self.in_dim()),
                rhs: (x.len(), 1),
            });
        }
        let decision = self.route(x, k_i)?;
        let mut mixture = vec![0.0; self.out_dim()];
        let mut experts = Vec::with_capacity(decision.selected.len());
        for (&j, &gate) in decision.selected.iter().zip(&decision.gate_weights) {
            let lora = &self.loras[j];
            let projected = lora.project(x)?;
            let mut output = self.experts[j].matvec(x)?;
            let adapted = lora.a.matvec(&projected)?;
            let scale = lora.scaling();
            for (o, d) in output.iter_mut().zip(&adapted) {
                *o += scale * d;
            }
            for (acc, o) in mixture.iter_mut().zip(&output) {
                *acc += gate * o;
            }
            experts.push(ExpertTrace {
                expert: j,
                gate,
                projected,
            });
        }
        Ok(SmoeTrace {
            decision,
            experts,
            mixture,
        })
    }
}

pub fn route_from_logits(logits: &[f64], k_i: usize, norm: GateNormalization) -> Result<RoutingDecision> {
    let probs = softmax(logits)?;
    let selected = topk_indices(&probs, k_i)?;
    let raw: Vec<f64> = selected.iter().map(|&j| probs[j]).collect();
    let gate_weights = match norm {
        GateNormalization::Raw => raw,
        GateNormalization::Renormalize => {
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|p| p / total).collect()
        }
    };
    Ok(RoutingDecision {
        selected,
        gate_weights,
    })
}

/// Free-function form of [`SmoeLayer::route`].
pub fn route(layer: &SmoeLayer, x: &[f64], k_i: usize) -> Result<RoutingDecision> {
    layer.route(x, k_i)
}

/// Free-function form of [`SmoeLayer::forward`].
pub fn smoe_forward(layer: &SmoeLayer, x: &[f64], k_i: usize) -> Result<(Vec<f64>, RoutingDecision)> {
    layer.forward(x, k_i)
}
