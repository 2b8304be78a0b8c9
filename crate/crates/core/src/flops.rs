//! Analytic forward-pass FLOPs and parameter accounting for dense and SMoE
//! architectures with LoRA adapters.
//!
//! Counting rules:
//! * a multiply-add is 2 FLOPs, so an `m×n` matrix applied to `T` tokens costs `2·T·m·n`;
//! * a LoRA adapter `A (m×r)`, `B (r×n)` costs `2·T·(m·r + r·n)` and is
//!   counted only for matrices that run (dense matrices and active experts);
//! * a router costs its `n×M` projection plus `M + M·⌈log₂M⌉` FLOPs per
//!   token for softmax and TopK;
//! * `T = seq_len · batch`; only matmul-shaped work is counted (no
//!   attention-score products, norms or embedding lookups).
//!
//! LoRA FLOPs are the difference between the adapted and the base model:
//! `count_model(spec).total_flops - count_model(spec at rank 0).total_flops`
//! equals `lora_flops` exactly (integer arithmetic).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SEQ_LEN: u64 = 128;

/// `2·seq_len·m·n`.
pub fn count_linear(m: u64, n: u64, seq_len: u64) -> u64 {
    2 * seq_len * m * n
}

/// `2·seq_len·(m·r + r·n)`.
pub fn count_lora(m: u64, n: u64, rank: u64, seq_len: u64) -> u64 {
    2 * seq_len * (m * rank + rank * n)
}

fn ceil_log2(m: u64) -> u64 {
    if m <= 1 {
        0
    } else {
        64 - (m - 1).leading_zeros() as u64
    }
}

/// Router projection plus softmax/TopK bookkeeping for `seq_len` tokens.
pub fn count_router(in_dim: u64, num_experts: u64, seq_len: u64) -> u64 {
    count_linear(in_dim, num_experts, seq_len) + seq_len * (num_experts + num_experts * ceil_log2(num_experts))
}

/// One weight matrix `rows × cols` (maps a `cols`-vector to a `rows`-vector).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixDims {
    pub rows: u64,
    pub cols: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    /// Always-on matrices, e.g. attention projections or an output head.
    Dense {
        name: String,
        matrices: Vec<MatrixDims>,
        /// 0 = frozen, no adapter.
        #[serde(default)]
        lora_rank: u64,
        #[serde(default = "one")]
        repeat: u64,
    },
    /// `num_experts` experts, each made of the same `matrices`, with `k_active` running per token.
    Smoe {
        name: String,
        num_experts: u64,
        k_active: u64,
        /// Input width scored by the router.
        router_dim: u64,
        matrices: Vec<MatrixDims>,
        #[serde(default)]
        lora_rank: u64,
        #[serde(default = "one")]
        repeat: u64,
    },
}

fn one() -> u64 {
    1
}

fn default_seq_len() -> u64 {
    DEFAULT_SEQ_LEN
}

/// Named override applied to a base architecture: a budget tier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetOverride {
    pub name: String,
    /// Replaces `k_active` of every SMoE layer.
    pub k_active: Option<u64>,
    /// Replaces the rank of every adapted (rank > 0) layer.
    pub lora_rank: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: String,
    #[serde(default = "default_seq_len")]
    pub seq_len: u64,
    #[serde(default = "one")]
    pub batch: u64,
    pub layers: Vec<Layer>,
    /// Budget tiers compared by the `flops` table, first one is the reference.
    #[serde(default)]
    pub budgets: Vec<BudgetOverride>,
}

impl ArchSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ArchSpec = toml::from_str(text).map_err(|e| Error::config("archspec", e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.batch == 0 {
            return Err(Error::domain("seq_len and batch must be at least 1"));
        }
        if self.layers.is_empty() {
            return Err(Error::domain("architecture has no layers"));
        }
        for layer in &self.layers {
            let (name, matrices, repeat) = match layer {
                Layer::Dense {
                    name, matrices, repeat, ..
                } => (name, matrices, *repeat),
                Layer::Smoe {
                    name,
                    num_experts,
                    k_active,
                    router_dim,
                    matrices,
                    repeat,
                    ..
                } => {
                    if *num_experts == 0 || *router_dim == 0 {
                        return Err(Error::domain(format!("layer `{name}`: experts and router_dim must be ≥ 1")));
                    }
                    if *k_active == 0 || k_active > num_experts {
                        return Err(Error::domain(format!(
                            "layer `{name}`: k_active = {k_active} must lie in [1, {num_experts}]"
                        )));
                    }
                    (name, matrices, *repeat)
                }
            };
            if repeat == 0 || matrices.is_empty() || matrices.iter().any(|d| d.rows == 0 || d.cols == 0) {
                return Err(Error::domain(format!(
                    "layer `{name}`: needs repeat ≥ 1 and at least one matrix with dims ≥ 1"
                )));
            }
        }
        Ok(())
    }

    /// A copy with `k_active` and/or adapter ranks replaced.
    pub fn with_budget(&self, budget: &BudgetOverride) -> Result<Self> {
        let mut out = self.clone();
        out.name = budget.name.clone();
        out.budgets.clear();
        for layer in &mut out.layers {
            match layer {
                Layer::Dense { lora_rank, .. } => {
                    if let (Some(r), true) = (budget.lora_rank, *lora_rank > 0) {
                        *lora_rank = r;
                    }
                }
                Layer::Smoe {
                    k_active, lora_rank, ..
                } => {
                    if let Some(k) = budget.k_active {
                        *k_active = k;
                    }
                    if let (Some(r), true) = (budget.lora_rank, *lora_rank > 0) {
                        *lora_rank = r;
                    }
                }
            }
        }
        out.validate()?;
        Ok(out)
    }

    /// The spec with every adapter removed.
    pub fn without_adapters(&self) -> Self {
        let mut out = self.clone();
        for layer in &mut out.layers {
            match layer {
                Layer::Dense { lora_rank, .. } | Layer::Smoe { lora_rank, .. } => *lora_rank = 0,
            }
        }
        out
    }

    /// Largest adapter rank and largest `k_active` (the table's `r` and `k` columns).
    pub fn headline(&self) -> (u64, Option<u64>) {
        let mut r = 0;
        let mut k = None;
        for layer in &self.layers {
            match layer {
                Layer::Dense { lora_rank, .. } => r = r.max(*lora_rank),
                Layer::Smoe {
                    lora_rank, k_active, ..
                } => {
                    r = r.max(*lora_rank);
                    k = Some(k.map_or(*k_active, |v: u64| v.max(*k_active)));
                }
            }
        }
        (r, k)
    }

    /// One spec per budget tier, or the spec itself when it lists none.
    pub fn budget_specs(&self) -> Result<Vec<ArchSpec>> {
        if self.budgets.is_empty() {
            return Ok(vec![self.clone()]);
        }
        self.budgets.iter().map(|b| self.with_budget(b)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub base_flops: u64,
    pub lora_flops: u64,
    pub total_flops: u64,
    /// P
    pub params_total: u64,
    /// P_a
    pub params_active: u64,
    /// P̂
    pub trainable_total: u64,
    /// P̂_a
    pub trainable_active: u64,
}

pub fn count_model(spec: &ArchSpec) -> Result<FlopsReport> {
    spec.validate()?;
    let tokens = spec.seq_len * spec.batch;
    let mut r = FlopsReport {
        base_flops: 0,
        lora_flops: 0,
        total_flops: 0,
        params_total: 0,
        params_active: 0,
        trainable_total: 0,
        trainable_active: 0,
    };
    for layer in &spec.layers {
        match layer {
            Layer::Dense {
                matrices,
                lora_rank,
                repeat,
                ..
            } => {
                for d in matrices {
                    let weights = d.rows * d.cols;
                    let adapter = lora_rank * (d.rows + d.cols);
                    r.base_flops += repeat * count_linear(d.rows, d.cols, tokens);
                    r.lora_flops += repeat * count_lora(d.rows, d.cols, *lora_rank, tokens);
                    r.params_total += repeat * weights;
                    r.params_active += repeat * weights;
                    r.trainable_total += repeat * adapter;
                    r.trainable_active += repeat * adapter;
                }
            }
            Layer::Smoe {
                num_experts,
                k_active,
                router_dim,
                matrices,
                lora_rank,
                repeat,
                ..
            } => {
                let router_params = router_dim * num_experts;
                r.base_flops += repeat * count_router(*router_dim, *num_experts, tokens);
                r.params_total += repeat * router_params;
                r.params_active += repeat * router_params;
                for d in matrices {
                    let weights = d.rows * d.cols;
                    let adapter = lora_rank * (d.rows + d.cols);
                    r.base_flops += repeat * k_active * count_linear(d.rows, d.cols, tokens);
                    r.lora_flops += repeat * k_active * count_lora(d.rows, d.cols, *lora_rank, tokens);
                    r.params_total += repeat * num_experts * weights;
                    r.params_active += repeat * k_active * weights;
                    r.trainable_total += repeat * num_experts * adapter;
                    r.trainable_active += repeat * k_active * adapter;
                }
            }
        }
    }
    r.total_flops = r.base_flops + r.lora_flops;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub budget: String,
    pub rank: u64,
    pub k_active: Option<u64>,
    pub report: FlopsReport,
    /// Total FLOPs as a percentage of the first row.
    pub percent_of_first: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetTable {
    pub rows: Vec<BudgetRow>,
}

pub fn compare_budgets(specs: &[ArchSpec]) -> Result<BudgetTable> {
    let first = specs.first().ok_or_else(|| Error::domain("no architectures to compare"))?;
    let reference = count_model(first)?.total_flops as f64;
    let rows = specs
        .iter()
        .map(|s| {
            let report = count_model(s)?;
            let (rank, k_active) = s.headline();
            Ok(BudgetRow {
                budget: s.name.clone(),
                rank,
                k_active,
                report,
                percent_of_first: 100.0 * report.total_flops as f64 / reference,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BudgetTable { rows })
}

/// `1234567890` → `1.2B`, the magnitude style of parameter and FLOPs columns.
pub fn human(n: u64) -> String {
    let v = n as f64;
    if v >= 1e9 {
        format!("{:.1}B", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.0}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.0}K", v / 1e3)
    } else {
        n.to_string()
    }
}

impl BudgetTable {
    /// Columns `budget | r | k | P_a/P | P̂_a/P̂ | FLOPs (% of first)`.
    pub fn to_text(&self) -> String {
        let header = ["budget", "r", "k", "P_a/P", "P^_a/P^", "FLOPs"];
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|row| {
                [
                    row.budget.clone(),
                    row.rank.to_string(),
                    row.k_active.map_or("-".into(), |k| k.to_string()),
                    format!("{}/{}", human(row.report.params_active), human(row.report.params_total)),
                    format!("{}/{}", human(row.report.trainable_active), human(row.report.trainable_total)),
                    format!("{} ({:.1}%)", human(row.report.total_flops), row.percent_of_first),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..6)
            .map(|c| cells.iter().map(|r| r[c].chars().count()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |cols: &[String]| {
            cols.iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = line(&header.map(String::from));
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "budget",
            "r",
            "k",
            "params_active",
            "params_total",
            "trainable_active",
            "trainable_total",
            "base_flops",
            "lora_flops",
            "total_flops",
            "percent_of_first",
        ])?;
        for row in &self.rows {
            let r = &row.report;
            w.write_record([
                row.budget.clone(),
                row.rank.to_string(),
                row.k_active.map_or(String::new(), |k| k.to_string()),
                r.params_active.to_string(),
                r.params_total.to_string(),
                r.trainable_active.to_string(),
                r.trainable_total.to_string(),
                r.base_flops.to_string(),
                r.lora_flops.to_string(),
                r.total_flops.to_string(),
                format!("{:.4}", row.percent_of_first),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<flops csv>", e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(k: u64, r: u64) -> ArchSpec {
        ArchSpec {
            name: format!("k{k}r{r}"),
            seq_len: 128,
            batch: 1,
            layers: vec![Layer::Smoe {
                name: "moe".into(),
                num_experts: 64,
                k_active: k,
                router_dim: 64,
                matrices: vec![MatrixDims { rows: 64, cols: 64 }],
                lora_rank: r,
                repeat: 1,
            }],
            budgets: vec![],
        }
    }

    #[test]
    fn linear_counts() {
        assert_eq!(count_linear(1, 1, 1), 2);
        assert_eq!(count_linear(4096, 4096, 128), 4_294_967_296);
        assert_eq!(count_linear(7, 3, 10) * 2, count_linear(7, 3, 20));
    }

    #[test]
    fn router_overhead() {
        // 2·1·4·8 projection + 8 softmax + 8·3 TopK
        assert_eq!(count_router(4, 8, 1), 64 + 8 + 24);
        assert_eq!(count_router(4, 1, 1), 8 + 1);
    }

    #[test]
    fn expert_term_scales_with_k() {
        let eight = count_model(&toy(8, 20)).unwrap();
        let one = count_model(&toy(1, 20)).unwrap();
        let router = count_router(64, 64, 128);
        assert_eq!((eight.base_flops - router) % 8, 0);
        assert_eq!((eight.base_flops - router) / 8, one.base_flops - router);
        assert_eq!(eight.lora_flops, 8 * one.lora_flops);
    }

    #[test]
    fn no_adapters_means_no_lora_cost() {
        let r = count_model(&toy(4, 0)).unwrap();
        assert_eq!(r.lora_flops, 0);
        assert_eq!(r.total_flops, r.base_flops);
        assert_eq!(r.trainable_total, 0);
    }

    #[test]
    fn full_activation_matches_dense_ensemble() {
        let smoe = count_model(&toy(64, 8)).unwrap();
        let dense = ArchSpec {
            name: "dense".into(),
            seq_len: 128,
            batch: 1,
            layers: vec![Layer::Dense {
                name: "ensemble".into(),
                matrices: vec![MatrixDims { rows: 64, cols: 64 }],
                lora_rank: 8,
                repeat: 64,
            }],
            budgets: vec![],
        };
        let d = count_model(&dense).unwrap();
        assert_eq!(smoe.base_flops - count_router(64, 64, 128), d.base_flops);
        assert_eq!(smoe.lora_flops, d.lora_flops);
        assert_eq!(smoe.params_active - 64 * 64, d.params_total);
    }

    #[test]
    fn invalid_specs() {
        assert!(count_model(&toy(65, 1)).is_err());
        assert!(count_model(&toy(0, 1)).is_err());
        let mut s = toy(1, 1);
        s.seq_len = 0;
        assert!(count_model(&s).is_err());
    }

    #[test]
    fn identical_specs_are_all_hundred_percent() {
        let t = compare_budgets(&[toy(2, 4), toy(2, 4), toy(2, 4)]).unwrap();
        assert!(t.rows.iter().all(|r| r.percent_of_first == 100.0));
        assert!(compare_budgets(&[]).is_err());
    }

    #[test]
    fn toml_round_trip_and_budgets() {
        let text = r#"
            name = "tiny"
            [[layers]]
            kind = "dense"
            name = "head"
            matrices = [{ rows = 10, cols = 4 }]
            [[layers]]
            kind = "smoe"
            name = "moe"
            num_experts = 4
            k_active = 2
            router_dim = 4
            matrices = [{ rows = 4, cols = 4 }]
            lora_rank = 2
            [[budgets]]
            name = "b1"
            [[budgets]]
            name = "b2"
            k_active = 1
        "#;
        let spec = ArchSpec::from_toml_str(text).unwrap();
        assert_eq!(spec.seq_len, 128);
        let tiers = spec.budget_specs().unwrap();
        assert_eq!(tiers[1].headline(), (2, Some(1)));
        // the frozen head stays frozen under a rank override
        let bumped = spec
            .with_budget(&BudgetOverride {
                name: "x".into(),
                k_active: None,
                lora_rank: Some(3),
            })
            .unwrap();
        assert!(matches!(bumped.layers[0], Layer::Dense { lora_rank: 0, .. }));
        assert!(matches!(
            ArchSpec::from_toml_str("name = 'x'\nlayers = []\nbogus = 1"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn table_renders() {
        let t = compare_budgets(&[toy(8, 20), toy(1, 20)]).unwrap();
        let text = t.to_text();
        assert!(text.lines().next().unwrap().contains("FLOPs"));
        assert_eq!(text.lines().count(), 3);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    proptest! {
        #[test]
        fn by_difference_identity(k in 1u64..=64, r in 0u64..64, seq in 1u64..512) {
            let mut s = toy(k, r);
            s.seq_len = seq;
            let with = count_model(&s).unwrap();
            let without = count_model(&s.without_adapters()).unwrap();
            prop_assert_eq!(with.total_flops - without.total_flops, with.lora_flops);
            prop_assert!(with.params_active <= with.params_total);
            prop_assert!(with.trainable_active <= with.trainable_total);
        }

        #[test]
        fn strictly_monotone(k in 1u64..64, r in 0u64..32, seq in 1u64..256, d in 1u64..128) {
            let base = |k, seq, d| {
                let mut s = toy(k, r);
                s.seq_len = seq;
                if let Layer::Smoe { matrices, .. } = &mut s.layers[0] {
                    matrices[0].rows = d;
                }
                count_model(&s).unwrap().total_flops
            };
            prop_assert!(base(k + 1, seq, d) > base(k, seq, d));
            prop_assert!(base(k, seq + 1, d) > base(k, seq, d));
            prop_assert!(base(k, seq, d + 1) > base(k, seq, d));
        }
    }
}
