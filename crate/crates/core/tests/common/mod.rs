//! Test-only oracles kept independent of the implementation paths they check.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smoe_fed::model::{LoraPair, ModelSpec, Sample, Target, TaskKind, ToyModel};
use smoe_fed::numerics::Matrix;

/// Recomputes the batch loss from scratch using merged weights `W + (α/r)AB`.
pub fn reference_loss(model: &ToyModel, batch: &[Sample<'_>], k_i: usize) -> f64 {
    let layer = &model.smoe;
    let mut total = 0.0;
    for s in batch {
        let z = model.embed.matvec(s.input).unwrap();
        let d = layer.route(&z, k_i).unwrap();
        let mut h = vec![0.0; layer.out_dim()];
        for (&j, &g) in d.selected.iter().zip(&d.gate_weights) {
            let merged = layer.experts[j].add(&layer.loras[j].delta()).unwrap();
            for (hv, v) in h.iter_mut().zip(merged.matvec(&z).unwrap()) {
                *hv += layer.rescaler * g * v;
            }
        }
        let y = model.head.matvec(&h).unwrap();
        total += match s.target {
            Target::Class(c) => {
                let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + y.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - y[c]
            }
            Target::Values(t) => {
                y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
            }
        };
    }
    total / batch.len() as f64
}

/// Random small model with non-trivial LoRA factors and rescaler.
pub fn random_model(seed: u64, task: TaskKind) -> ToyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ModelSpec {
        input_dim: 4,
        expert_in: 4,
        expert_out: 4,
        num_experts: 3,
        k_full: 3,
        rank: 2,
        lora_alpha: 16.0,
        output_dim: 3,
        task,
    };
    let mut model = ToyModel::random(&spec, &mut rng).unwrap();
    for l in model.smoe.loras.iter_mut() {
        *l = LoraPair::new(
            Matrix::random_normal(4, 2, 0.05, &mut rng),
            Matrix::random_normal(2, 4, 0.05, &mut rng),
            16.0,
        )
        .unwrap();
    }
    model.smoe.rescaler = rng.random_range(0.5..1.5);
    model
}

pub struct OwnedBatch {
    pub inputs: Vec<Vec<f64>>,
    pub classes: Vec<usize>,
    pub targets: Vec<Vec<f64>>,
}

impl OwnedBatch {
    pub fn random(seed: u64, n: usize, dim: usize, out: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        Self {
            inputs: (0..n).map(|_| Matrix::random_normal(dim, 1, 1.0, &mut rng).into_vec()).collect(),
            classes: (0..n).map(|_| rng.random_range(0..out)).collect(),
            targets: (0..n).map(|_| Matrix::random_normal(out, 1, 1.0, &mut rng).into_vec()).collect(),
        }
    }

    pub fn samples(&self, task: TaskKind) -> Vec<Sample<'_>> {
        (0..self.inputs.len())
            .map(|i| Sample {
                input: &self.inputs[i],
                target: match task {
                    TaskKind::Classification => Target::Class(self.classes[i]),
                    TaskKind::Regression => Target::Values(&self.targets[i]),
                },
            })
            .collect()
    }
}

/// Relative error with a floor on the denominator so entries that are
/// numerically zero in both routes do not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error between analytic gradients and central differences
/// of [`reference_loss`] over every LoRA entry and the rescaler.
pub fn max_gradcheck_error(model: &ToyModel, batch: &[Sample<'_>], k_i: usize, eps: f64) -> f64 {
    let out = model.loss_and_grads(batch, k_i).unwrap();
    let mut worst: f64 = 0.0;
    let central = |m: &mut ToyModel, set: &dyn Fn(&mut ToyModel, f64)| {
        set(m, eps);
        let up = reference_loss(m, batch, k_i);
        set(m, -2.0 * eps);
        let down = reference_loss(m, batch, k_i);
        set(m, eps);
        (up - down) / (2.0 * eps)
    };
    let mut m = model.clone();
    for j in 0..m.smoe.loras.len() {
        let (ar, ac) = m.smoe.loras[j].a.shape();
        for r in 0..ar {
            for c in 0..ac {
                let num = central(&mut m, &|m, d| {
                    let v = m.smoe.loras[j].a.get(r, c);
                    m.smoe.loras[j].a.set(r, c, v + d);
                });
                worst = worst.max(rel_err(out.grads.loras[j].a.get(r, c), num));
            }
        }
        let (br, bc) = m.smoe.loras[j].b.shape();
        for r in 0..br {
            for c in 0..bc {
                let num = central(&mut m, &|m, d| {
                    let v = m.smoe.loras[j].b.get(r, c);
                    m.smoe.loras[j].b.set(r, c, v + d);
                });
                worst = worst.max(rel_err(out.grads.loras[j].b.get(r, c), num));
            }
        }
    }
    let num = central(&mut m, &|m, d| m.smoe.rescaler += d);
    worst.max(rel_err(out.grads.rescaler, num))
}

/// Small, fast experiment config; `extra` is appended verbatim (sections may be overridden there).
pub fn small_config(name: &str, method: &str, federation: &str, extra: &str) -> smoe_fed::experiment::ExperimentConfig {
    let text = format!(
        r#"
[experiment]
name = "{name}"
method = "{method}"
seed = 11
rounds = 2

[model]
num_experts = 8
k_full = 4
rank = 4
expert_dim = 6

[data]
kind = "classification"
classes = 4
per_class = 40
dim = 6
spread = 1.0

[federation]
{federation}

[training]
lr = 0.01
batch_size = 8
local_epochs = 2
{extra}
"#
    );
    smoe_fed::experiment::ExperimentConfig::from_toml_str(&text).unwrap()
}

/// Path of a config shipped in the repository's `configs/` directory.
pub fn shipped_config(file: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(file)
}
