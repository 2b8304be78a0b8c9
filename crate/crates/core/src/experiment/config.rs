use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::TaskSpec;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{CountingMode, GateNormalization, ModelSpec, RescalerMode, TaskKind, DEFAULT_LORA_ALPHA};

/// Budget tier names, most to least capable.
pub const BUDGET_TIERS: [&str; 4] = ["b1", "b2", "b3", "b4"];

/// Rank fraction of each tier for rank compression (the 20/12/8/6 pattern at rank 20).
pub const RANK_FRACTIONS: [f64; 4] = [1.0, 0.6, 0.4, 0.3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Partial expert activation, rescaler, activation-aware aggregation.
    Flame,
    /// Every client trains all `k_full` experts at the smallest configured rank; FedAvg.
    FedavgTrivial,
    /// Every client runs `k_full` experts on an SVD truncation at its tier's rank; FedAvg.
    RankCompress,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Flame => "flame",
            Method::FedavgTrivial => "fedavg_trivial",
            Method::RankCompress => "rank_compress",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub method: Method,
    pub seed: u64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub execution: Execution,
}

fn default_rounds() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_experts: usize,
    pub k_full: usize,
    pub rank: usize,
    pub lora_alpha: f64,
    /// Width of the expert input and output.
    pub expert_dim: usize,
    pub gate_norm: GateNormalization,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            num_experts: 16,
            k_full: 8,
            rank: 8,
            lora_alpha: DEFAULT_LORA_ALPHA,
            expert_dim: 16,
            gate_norm: GateNormalization::Renormalize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub clients: usize,
    pub dirichlet_alpha: f64,
    pub participation: f64,
    /// Tiers assigned to clients round-robin: client `i` gets `budgets[i % len]`.
    pub budgets: Vec<String>,
    pub temperature: u32,
    pub rescaler: RescalerMode,
    pub counting: CountingMode,
    /// Store every step's routing decisions in `rounds.jsonl`.
    pub log_routing: bool,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            clients: 4,
            dirichlet_alpha: 0.5,
            participation: 1.0,
            budgets: vec!["b1".into()],
            temperature: 2,
            rescaler: RescalerMode::Learnable,
            counting: CountingMode::PerStep,
            log_routing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            lr: 1.5e-4,
            batch_size: 16,
            local_epochs: 1,
        }
    }
}

/// Grid axes; each combination becomes its own run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub temperatures: Option<Vec<u32>>,
    pub rescalers: Option<Vec<RescalerMode>>,
}

/// Written into resolved snapshots; ignored when hashing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    /// SHA-256 of the canonical config text without this section.
    pub content_hash: String,
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub model: ModelSection,
    pub data: TaskSpec,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Zero-based tier level of a budget name.
pub fn tier_level(name: &str) -> Option<usize> {
    BUDGET_TIERS.iter().position(|t| *t == name)
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .and_then(|s| text.get(..s.start))
                .map(|before| {
                    // innermost [section] header preceding the error
                    before
                        .lines()
                        .rev()
                        .find_map(|l| l.trim().strip_prefix('[').and_then(|l| l.strip_suffix(']')))
                        .unwrap_or("<root>")
                        .to_string()
                })
                .unwrap_or_else(|| "<root>".into());
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<serialize>", e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML of this config with provenance removed.
    /// SHA-256 of the canonical TOML, ignoring provenance and the execution
    /// mode (which never changes results).
    pub fn content_hash(&self) -> Result<String> {
        let mut bare = self.clone();
        bare.provenance = None;
        bare.experiment.execution = Execution::default();
        Ok(hex::encode(Sha256::digest(bare.to_toml()?.as_bytes())))
    }

    /// Canonical text plus a provenance section recording seed and hash.
    pub fn resolved_toml(&self) -> Result<String> {
        let mut out = self.clone();
        out.provenance = Some(Provenance {
            seed: self.experiment.seed,
            content_hash: self.content_hash()?,
            generator: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
        });
        out.to_toml()
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.name.is_empty()
            || self
                .experiment
                .name
                .chars()
                .any(|c| !(c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.'))
        {
            return Err(Error::config(
                "experiment.name",
                "must be non-empty and use only letters, digits, `_`, `-`, `.`",
            ));
        }
        let m = &self.model;
        if m.k_full == 0 || m.k_full > m.num_experts {
            return Err(Error::config(
                "model.k_full",
                format!("must lie in [1, num_experts = {}]", m.num_experts),
            ));
        }
        if !(m.lora_alpha > 0.0 && m.lora_alpha.is_finite()) {
            return Err(Error::config("model.lora_alpha", "must be positive and finite"));
        }
        let d = &self.data;
        if d.classes < 2 {
            return Err(Error::config("data.classes", "must be at least 2"));
        }
        if d.per_class == 0 || d.dim == 0 {
            return Err(Error::config("data", "per_class and dim must be at least 1"));
        }
        if !(d.spread >= 0.0 && d.spread.is_finite()) {
            return Err(Error::config("data.spread", "must be non-negative and finite"));
        }
        if !(d.separation > 0.0 && d.separation.is_finite()) {
            return Err(Error::config("data.separation", "must be positive and finite"));
        }
        if d.kind == TaskKind::Regression && d.target_dim == 0 {
            return Err(Error::config("data.target_dim", "must be at least 1"));
        }
        let total = d.classes * d.per_class;
        if total < 10 {
            return Err(Error::config("data", format!("{total} examples cannot be split 80/10/10")));
        }
        let f = &self.federation;
        if f.clients == 0 || f.clients > total * 8 / 10 {
            return Err(Error::config(
                "federation.clients",
                format!("must lie in [1, {}] (training examples)", total * 8 / 10),
            ));
        }
        if !(f.dirichlet_alpha > 0.0 && f.dirichlet_alpha.is_finite()) {
            return Err(Error::config("federation.dirichlet_alpha", "must be positive and finite"));
        }
        if !(f.participation > 0.0 && f.participation <= 1.0) {
            return Err(Error::config("federation.participation", "must lie in (0, 1]"));
        }
        if f.budgets.is_empty() {
            return Err(Error::config("federation.budgets", "list at least one budget tier"));
        }
        for b in &f.budgets {
            let level = tier_level(b).ok_or_else(|| {
                Error::config(
                    "federation.budgets",
                    format!("unknown tier `{b}`, expected one of {BUDGET_TIERS:?}"),
                )
            })?;
            if self.experiment.method == Method::Flame && m.k_full >> level == 0 {
                return Err(Error::config(
                    "federation.budgets",
                    format!("tier `{b}` needs k_full / {} ≥ 1, k_full = {}", 1 << level, m.k_full),
                ));
            }
        }
        if f.temperature > 64 {
            return Err(Error::config("federation.temperature", "must be at most 64"));
        }
        let t = &self.training;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::config("training.lr", "must be positive and finite"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        if let Some(s) = &self.sweep {
            if s.temperatures.as_ref().is_some_and(Vec::is_empty) || s.rescalers.as_ref().is_some_and(Vec::is_empty) {
                return Err(Error::config("sweep", "sweep axes must not be empty"));
            }
            if s.temperatures.as_ref().is_some_and(|ts| ts.iter().any(|&t| t > 64)) {
                return Err(Error::config("sweep.temperatures", "must be at most 64"));
            }
        }
        self.model_spec()?.validate()
    }

    /// Experts active for a tier under this method.
    pub fn tier_k(&self, tier: &str) -> usize {
        match (self.experiment.method, tier_level(tier)) {
            (Method::Flame, Some(level)) => self.model.k_full >> level,
            _ => self.model.k_full,
        }
    }

    /// Adapter rank a tier trains under this method.
    pub fn tier_rank(&self, tier: &str) -> usize {
        match self.experiment.method {
            Method::Flame => self.model.rank,
            Method::FedavgTrivial => self.global_rank(),
            Method::RankCompress => rank_preset(self.model.rank, tier_level(tier).unwrap_or(0)),
        }
    }

    /// Rank of the server-held adapters: the smallest tier rank for the trivial baseline.
    pub fn global_rank(&self) -> usize {
        match self.experiment.method {
            Method::FedavgTrivial => self
                .federation
                .budgets
                .iter()
                .map(|b| rank_preset(self.model.rank, tier_level(b).unwrap_or(0)))
                .min()
                .unwrap_or(self.model.rank),
            _ => self.model.rank,
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let d = &self.data;
        Ok(ModelSpec {
            input_dim: d.dim,
            expert_in: self.model.expert_dim,
            expert_out: self.model.expert_dim,
            num_experts: self.model.num_experts,
            k_full: self.model.k_full,
            rank: self.global_rank(),
            lora_alpha: self.model.lora_alpha,
            output_dim: match d.kind {
                TaskKind::Classification => d.classes,
                TaskKind::Regression => d.target_dim,
            },
            task: d.kind,
        })
    }

    /// Distinct tiers in first-appearance order, sorted most to least capable.
    pub fn tiers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for b in &self.federation.budgets {
            if !out.contains(b) {
                out.push(b.clone());
            }
        }
        out.sort_by_key(|b| tier_level(b));
        out
    }

    /// One sweep-free config per grid point, labelled `t{t}`, `{rescaler}` or both.
    pub fn expand(&self) -> Vec<(Option<String>, ExperimentConfig)> {
        let Some(sweep) = &self.sweep else {
            return vec![(None, self.clone())];
        };
        let temps: Vec<Option<u32>> = sweep
            .temperatures
            .as_ref()
            .map_or(vec![None], |v| v.iter().copied().map(Some).collect());
        let modes: Vec<Option<RescalerMode>> = sweep
            .rescalers
            .as_ref()
            .map_or(vec![None], |v| v.iter().copied().map(Some).collect());
        let mut out = Vec::new();
        for t in &temps {
            for mode in &modes {
                let mut cfg = self.clone();
                cfg.sweep = None;
                cfg.provenance = None;
                let mut parts = Vec::new();
                if let Some(t) = t {
                    cfg.federation.temperature = *t;
                    parts.push(format!("t{t}"));
                }
                if let Some(mode) = mode {
                    cfg.federation.rescaler = *mode;
                    parts.push(rescaler_label(*mode).to_string());
                }
                out.push((Some(parts.join("_")), cfg));
            }
        }
        out
    }
}

pub fn rescaler_label(mode: RescalerMode) -> &'static str {
    match mode {
        RescalerMode::Learnable => "learnable",
        RescalerMode::StaticKOverKi => "static_k_over_ki",
        RescalerMode::None => "none",
    }
}

/// `max(1, round(r · fraction))` for tier `level`.
pub fn rank_preset(rank: usize, level: usize) -> usize {
    ((rank as f64 * RANK_FRACTIONS[level.min(3)]).round() as usize).max(1)
}
