use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::client::{ClientUpdate, GlobalState};
use crate::model::LoraPair;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// `γ_i = |D_i|`
    FedAvg,
    /// `γ_i^j = (a_i^j / S_i)^t · |D_i|`
    FlameActivationAware,
}

/// Server weighting rule. An expert with zero total weight keeps its previous global adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationPolicy {
    pub kind: PolicyKind,
    /// Ignored by FedAvg.
    pub temperature: u32,
}

impl AggregationPolicy {
    pub fn fedavg() -> Self {
        Self {
            kind: PolicyKind::FedAvg,
            temperature: 0,
        }
    }

    pub fn activation_aware(temperature: u32) -> Self {
        Self {
            kind: PolicyKind::FlameActivationAware,
            temperature,
        }
    }
}

/// `weights[i][j]` for update `i` (input order) and expert `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub client_ids: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    /// Clients that ran zero steps and therefore carry no weight.
    pub dropped: Vec<usize>,
}

impl WeightTable {
    pub fn expert_mass(&self, j: usize) -> f64 {
        self.weights.iter().map(|row| row[j]).sum()
    }
}

pub fn compute_weights(updates: &[ClientUpdate], policy: &AggregationPolicy) -> Result<WeightTable> {
    let first = updates
        .first()
        .ok_or_else(|| Error::domain("no client updates to weight"))?;
    let m = first.loras.len();
    let mut table = WeightTable {
        client_ids: Vec::with_capacity(updates.len()),
        weights: Vec::with_capacity(updates.len()),
        dropped: Vec::new(),
    };
    for u in updates {
        if u.loras.len() != m || u.activation.num_experts() != m {
            return Err(Error::domain(format!(
                "client {} reports {} experts, expected {m}",
                u.client_id,
                u.loras.len()
            )));
        }
        table.client_ids.push(u.client_id);
        if u.activation.steps == 0 {
            warn!("client {} ran no training steps; dropped from aggregation", u.client_id);
            table.dropped.push(u.client_id);
            table.weights.push(vec![0.0; m]);
            continue;
        }
        let size = u.dataset_size as f64;
        let row = match policy.kind {
            PolicyKind::FedAvg => vec![size; m],
            PolicyKind::FlameActivationAware => {
                let s = u.activation.steps as f64;
                // powi(0) is exactly 1 for every base, including 0
                u.activation
                    .counts
                    .iter()
                    .map(|&a| (a as f64 / s).powi(policy.temperature as i32) * size)
                    .collect()
            }
        };
        table.weights.push(row);
    }
    Ok(table)
}

/// Per-expert weighted average of client adapters; see [`aggregate_with_weights`].
pub fn aggregate(updates: &[ClientUpdate], previous: &GlobalState, policy: &AggregationPolicy) -> Result<GlobalState> {
    aggregate_with_weights(updates, previous, policy).map(|(g, _)| g)
}

/// `A^j = Σ_i γ_i^j A_i^j / Σ_i γ_i^j` and likewise for `B^j`, accumulated in
/// update order. Experts with `Σ_i γ_i^j = 0` are carried over from `previous`.
pub fn aggregate_with_weights(
    updates: &[ClientUpdate],
    previous: &GlobalState,
    policy: &AggregationPolicy,
) -> Result<(GlobalState, WeightTable)> {
    let table = compute_weights(updates, policy)?;
    if previous.loras.len() != updates[0].loras.len() {
        return Err(Error::domain(format!(
            "previous global has {} experts, updates have {}",
            previous.loras.len(),
            updates[0].loras.len()
        )));
    }
    for u in updates {
        for (p, c) in previous.loras.iter().zip(&u.loras) {
            p.a.check_same_shape("aggregate (A)", &c.a)?;
            p.b.check_same_shape("aggregate (B)", &c.b)?;
        }
    }

    let mut loras = Vec::with_capacity(previous.loras.len());
    for (j, prev) in previous.loras.iter().enumerate() {
        let mass = table.expert_mass(j);
        if mass == 0.0 {
            loras.push(prev.clone());
            continue;
        }
        let mut a = Matrix::zeros(prev.a.rows(), prev.a.cols());
        let mut b = Matrix::zeros(prev.b.rows(), prev.b.cols());
        for (u, row) in updates.iter().zip(&table.weights) {
            let w = row[j];
            if w == 0.0 {
                continue;
            }
            a.axpy(w, &u.loras[j].a)?;
            b.axpy(w, &u.loras[j].b)?;
        }
        a.data_mut().iter_mut().for_each(|v| *v /= mass);
        b.data_mut().iter_mut().for_each(|v| *v /= mass);
        loras.push(LoraPair {
            a,
            b,
            alpha: prev.alpha,
        });
    }
    let next = GlobalState {
        loras,
        round_index: previous.round_index + 1,
    };
    if !next.is_finite() {
        return Err(Error::Numeric("aggregated adapters are not finite".into()));
    }
    Ok((next, table))
}
