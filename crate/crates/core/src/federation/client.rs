use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{compress_for_client, decompress_update};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::{ActivationCounter, CountingMode, LoraPair, RescalerMode, ToyModel};
use crate::numerics::{adam_update_in_place, AdamHyper, AdamState, Matrix};

/// Server-held adapters for every expert.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub loras: Vec<LoraPair>,
    pub round_index: usize,
}

impl GlobalState {
    pub fn new(loras: Vec<LoraPair>) -> Self {
        Self {
            loras,
            round_index: 0,
        }
    }

    pub fn from_model(model: &ToyModel) -> Self {
        Self::new(model.smoe.loras.clone())
    }

    pub fn rank(&self) -> usize {
        self.loras.first().map_or(0, LoraPair::rank)
    }

    pub fn num_experts(&self) -> usize {
        self.loras.len()
    }

    pub fn is_finite(&self) -> bool {
        self.loras.iter().all(|l| l.a.is_finite() && l.b.is_finite())
    }
}

/// What a client can afford: fewer active experts, or a lower adapter rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Experts(usize),
    Rank(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub id: usize,
    /// Indices into the shared training set.
    pub indices: Vec<usize>,
    pub budget: Budget,
    /// Budget tier label, e.g. `b1`.
    pub tier: String,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl ClientConfig {
    /// Experts this client activates per example.
    pub fn active_experts(&self, k_full: usize) -> usize {
        match self.budget {
            Budget::Experts(k) => k,
            Budget::Rank(_) => k_full,
        }
    }

    /// Adapter rank this client trains.
    pub fn rank(&self, r_global: usize) -> usize {
        match self.budget {
            Budget::Experts(_) => r_global,
            Budget::Rank(r) => r,
        }
    }

    pub fn validate(&self, k_full: usize, r_global: usize) -> Result<()> {
        match self.budget {
            Budget::Experts(k) if k == 0 || k > k_full => Err(Error::Budget { k_i: k, k_full }),
            Budget::Rank(r) if r == 0 || r > r_global => Err(Error::domain(format!(
                "client {} rank budget {r} outside [1, {r_global}]",
                self.id
            ))),
            _ if self.indices.is_empty() => Err(Error::domain(format!("client {} has no data", self.id))),
            _ if self.batch_size == 0 => Err(Error::domain("batch_size must be at least 1")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub adam: AdamHyper,
    pub rescaler_mode: RescalerMode,
    pub counting: CountingMode,
    /// Keep every step's routing decisions in the update.
    pub log_routing: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            adam: AdamHyper::default(),
            rescaler_mode: RescalerMode::Learnable,
            counting: CountingMode::PerStep,
            log_routing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Trained adapters at the global rank.
    pub loras: Vec<LoraPair>,
    pub activation: ActivationCounter,
    pub dataset_size: usize,
    pub rescaler: f64,
    /// Mean batch loss of each local epoch.
    pub epoch_losses: Vec<f64>,
    /// `routing_log[step][example]` = selected experts, when requested.
    pub routing_log: Option<Vec<Vec<Vec<usize>>>>,
}

impl ClientUpdate {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Copies the global adapters into a client model, trains them with Adam on
/// the client's partition, and returns the trained adapters with activation counts.
///
/// Rank-budgeted clients train an SVD truncation of the global adapters and
/// hand back a zero-padded update; a rank equal to the global rank skips the SVD.
pub fn local_train(
    global: &GlobalState,
    client: &ClientConfig,
    template: &ToyModel,
    data: &Dataset,
    opts: &TrainOptions,
    rescaler_init: f64,
) -> Result<ClientUpdate> {
    let k_full = template.smoe.k_full;
    let r_global = global.rank();
    client.validate(k_full, r_global)?;
    if global.loras.len() != template.smoe.num_experts()
        || global
            .loras
            .iter()
            .zip(&template.smoe.loras)
            .any(|(g, t)| (g.out_dim(), g.in_dim()) != (t.out_dim(), t.in_dim()))
    {
        return Err(Error::domain("global adapters do not fit the model template"));
    }
    let k_i = client.active_experts(k_full);
    let r_i = client.rank(r_global);

    let mut model = template.clone();
    model.smoe.loras = if r_i < r_global {
        compress_for_client(&global.loras, r_i)?
    } else {
        global.loras.clone()
    };
    model.smoe.rescaler = match opts.rescaler_mode {
        RescalerMode::Learnable => rescaler_init,
        mode => mode.initial_value(k_full, k_i),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(client.seed);
    let mut states: Vec<(AdamState, AdamState)> = model
        .smoe
        .loras
        .iter()
        .map(|l| (AdamState::for_param(&l.a, opts.adam), AdamState::for_param(&l.b, opts.adam)))
        .collect();
    let mut rescaler_state = AdamState::new(1, 1, opts.adam);
    let mut counter = ActivationCounter::with_mode(model.smoe.num_experts(), opts.counting);
    let mut log = opts.log_routing.then(Vec::new);
    let mut epoch_losses = Vec::with_capacity(client.local_epochs);
    let mut order = client.indices.clone();
    let mut step: u64 = 0;

    for _ in 0..client.local_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(client.batch_size) {
            let batch = data.samples(chunk);
            // Parameters that are finite but huge overflow inside the forward pass.
            let out = match model.loss_and_grads(&batch, k_i) {
                Err(Error::Numeric(_)) if step > 0 => {
                    return Err(Error::Divergence {
                        client_id: client.id,
                        step,
                        loss: f64::INFINITY,
                    })
                }
                res => res?,
            };
            if !out.loss.is_finite() {
                return Err(Error::Divergence {
                    client_id: client.id,
                    step,
                    loss: out.loss,
                });
            }
            counter.record_step(&out.decisions);
            if let Some(log) = log.as_mut() {
                log.push(out.decisions.iter().map(|d| d.selected.clone()).collect());
            }
            for ((lora, grad), (sa, sb)) in model.smoe.loras.iter_mut().zip(&out.grads.loras).zip(&mut states) {
                adam_update_in_place(&mut lora.a, &grad.a, sa)?;
                adam_update_in_place(&mut lora.b, &grad.b, sb)?;
            }
            if opts.rescaler_mode.is_trainable() {
                let mut s = Matrix::from_rows(&[&[model.smoe.rescaler]]);
                adam_update_in_place(&mut s, &Matrix::from_rows(&[&[out.grads.rescaler]]), &mut rescaler_state)?;
                model.smoe.rescaler = s.get(0, 0);
            }
            if !model.smoe.rescaler.is_finite() || model.smoe.loras.iter().any(|l| !l.a.is_finite() || !l.b.is_finite()) {
                return Err(Error::Divergence {
                    client_id: client.id,
                    step,
                    loss: f64::NAN,
                });
            }
            sum += out.loss;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }

    let loras = if r_i < r_global {
        model
            .smoe
            .loras
            .iter()
            .map(|p| decompress_update(p, r_global))
            .collect::<Result<Vec<_>>>()?
    } else {
        model.smoe.loras
    };
    Ok(ClientUpdate {
        client_id: client.id,
        loras,
        activation: counter,
        dataset_size: client.indices.len(),
        rescaler: model.smoe.rescaler,
        epoch_losses,
        routing_log: log,
    })
}
