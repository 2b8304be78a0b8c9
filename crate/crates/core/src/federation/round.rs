use std::io::Write;
use std::path::Path;

use log::warn;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::exec::{map_ordered, Execution};
use crate::federation::aggregate::{aggregate_with_weights, AggregationPolicy, WeightTable};
use crate::federation::client::{local_train, ClientConfig, ClientUpdate, GlobalState, TrainOptions};
use crate::model::ToyModel;

/// Number of clients drawn at participation `p`: `round(p·N)` rounding halves up, at least one.
pub fn sample_size(n: usize, p: f64) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::domain(format!("participation must lie in (0, 1], got {p}")));
    }
    Ok(((p * n as f64 + 0.5).floor() as usize).clamp(1, n.max(1)))
}

/// Positions of the sampled clients, ascending.
pub fn sample_indices<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Vec<usize>> {
    let k = sample_size(n, p)?;
    if n == 0 {
        return Err(Error::domain("no clients to sample from"));
    }
    if k == n {
        return Ok((0..n).collect());
    }
    let mut picked = index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Uniform sample without replacement, returned in client order.
pub fn sample_clients<R: Rng + ?Sized>(all: &[ClientConfig], p: f64, rng: &mut R) -> Result<Vec<ClientConfig>> {
    Ok(sample_indices(all.len(), p, rng)?
        .into_iter()
        .map(|i| all[i].clone())
        .collect())
}

/// Everything a round needs besides the global state and the client list.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub template: &'a ToyModel,
    pub data: &'a Dataset,
    pub train: TrainOptions,
    pub policy: AggregationPolicy,
    pub participation: f64,
    pub execution: Execution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: usize,
    pub tier: String,
    pub k_i: usize,
    pub rank: usize,
    pub dataset_size: usize,
    pub steps: u64,
    pub counts: Vec<u64>,
    /// `a_i^j / S_i`
    pub frequencies: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub rescaler: f64,
    pub diverged: bool,
    pub dropped: bool,
    pub note: Option<String>,
    /// `routing_log[step][example]` = selected experts, when routing logging is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing_log: Option<Vec<Vec<Vec<usize>>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// Index of the global state this round produced (first round = 1).
    pub round: usize,
    pub policy: AggregationPolicy,
    pub num_experts: usize,
    pub clients: Vec<ClientRecord>,
    pub weights: Option<WeightTable>,
    pub total_steps: u64,
}

impl RoundReport {
    /// Participating, non-diverged clients and their activation frequencies.
    pub fn frequency_rows(&self) -> Vec<(usize, &[f64])> {
        self.clients
            .iter()
            .filter(|c| !c.diverged)
            .map(|c| (c.client_id, c.frequencies.as_slice()))
            .collect()
    }

    pub fn mean_train_loss(&self) -> Option<f64> {
        let finals: Vec<f64> = self
            .clients
            .iter()
            .filter(|c| !c.diverged)
            .filter_map(|c| c.epoch_losses.last().copied())
            .collect();
        (!finals.is_empty()).then(|| finals.iter().sum::<f64>() / finals.len() as f64)
    }

    /// Heatmap with header `client_id,expert_0,…,expert_{M-1}`, clients as rows.
    pub fn write_heatmap<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["client_id".to_string()];
        header.extend((0..self.num_experts).map(|j| format!("expert_{j}")));
        w.write_record(&header)?;
        for (id, freqs) in self.frequency_rows() {
            let mut row = vec![id.to_string()];
            row.extend(freqs.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<heatmap>", e))?;
        Ok(())
    }

    pub fn write_heatmap_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_heatmap(std::io::BufWriter::new(file))
    }
}

/// Mixes a client's base seed with a per-round draw.
fn round_seed(base: u64, draw: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ draw
}

/// Sample, broadcast, train the sampled clients, aggregate.
///
/// `rescalers[i]` holds the last local rescaler of `clients[i]` and is
/// updated for every client that trained. Client updates enter aggregation
/// in client order regardless of execution mode. Diverged clients are
/// excluded and flagged in the report.
pub fn run_round<R: Rng + ?Sized>(
    state: &GlobalState,
    clients: &[ClientConfig],
    ctx: &RoundContext<'_>,
    rescalers: &mut [f64],
    rng: &mut R,
) -> Result<(GlobalState, RoundReport)> {
    if rescalers.len() != clients.len() {
        return Err(Error::domain("one rescaler per client is required"));
    }
    let k_full = ctx.template.smoe.k_full;
    let r_global = state.rank();
    for c in clients {
        c.validate(k_full, r_global)?;
    }
    let picked = sample_indices(clients.len(), ctx.participation, rng)?;
    let jobs: Vec<(usize, ClientConfig)> = picked
        .iter()
        .map(|&i| {
            let mut cfg = clients[i].clone();
            cfg.seed = round_seed(cfg.seed, rng.next_u64());
            (i, cfg)
        })
        .collect();

    let results: Vec<Result<ClientUpdate>> = map_ordered(ctx.execution, &jobs, |(i, cfg)| {
        local_train(state, cfg, ctx.template, ctx.data, &ctx.train, rescalers[*i])
    });

    let mut updates = Vec::with_capacity(results.len());
    let mut records = Vec::with_capacity(results.len());
    for ((i, cfg), res) in jobs.iter().zip(results) {
        let base = ClientRecord {
            client_id: cfg.id,
            tier: cfg.tier.clone(),
            k_i: cfg.active_experts(k_full),
            rank: cfg.rank(r_global),
            dataset_size: cfg.indices.len(),
            steps: 0,
            counts: vec![0; state.num_experts()],
            frequencies: vec![0.0; state.num_experts()],
            epoch_losses: Vec::new(),
            rescaler: rescalers[*i],
            diverged: false,
            dropped: false,
            note: None,
            routing_log: None,
        };
        match res {
            Ok(u) => {
                rescalers[*i] = u.rescaler;
                records.push(ClientRecord {
                    steps: u.activation.steps,
                    counts: u.activation.counts.clone(),
                    frequencies: u.activation.frequencies(),
                    epoch_losses: u.epoch_losses.clone(),
                    rescaler: u.rescaler,
                    dropped: u.activation.steps == 0,
                    routing_log: u.routing_log.clone(),
                    ..base
                });
                updates.push(u);
            }
            Err(e @ Error::Divergence { .. }) => {
                warn!("excluding client {} from aggregation: {e}", cfg.id);
                records.push(ClientRecord {
                    diverged: true,
                    note: Some(e.to_string()),
                    ..base
                });
            }
            Err(e) => return Err(e),
        }
    }

    let (next, weights) = if updates.is_empty() {
        warn!("round {}: no usable client updates; global state carried over", state.round_index + 1);
        let mut carried = state.clone();
        carried.round_index += 1;
        (carried, None)
    } else {
        let (g, w) = aggregate_with_weights(&updates, state, &ctx.policy)?;
        (g, Some(w))
    };
    let total_steps = records.iter().map(|r| r.steps).sum();
    let report = RoundReport {
        round: next.round_index,
        policy: ctx.policy,
        num_experts: state.num_experts(),
        clients: records,
        weights,
        total_steps,
    };
    Ok((next, report))
}
