use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::lora::{LoraPair, DEFAULT_LORA_ALPHA};
use crate::model::smoe::{RoutingDecision, SmoeLayer};
use crate::numerics::{log_sum_exp, softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target<'a> {
    Class(usize),
    Values(&'a [f64]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample<'a> {
    pub input: &'a [f64],
    pub target: Target<'a>,
}

/// Shapes of the toy network: `input → embed → SMoE → head → output`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Expert input width `n`.
    pub expert_in: usize,
    /// Expert output width `m`.
    pub expert_out: usize,
    pub num_experts: usize,
    pub k_full: usize,
    pub rank: usize,
    pub lora_alpha: f64,
    /// Classes for classification, target width for regression.
    pub output_dim: usize,
    pub task: TaskKind,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("expert_in", self.expert_in),
            ("expert_out", self.expert_out),
            ("num_experts", self.num_experts),
            ("rank", self.rank),
            ("output_dim", self.output_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be at least 1"));
            }
        }
        if self.k_full == 0 || self.k_full > self.num_experts {
            return Err(Error::config(
                "model.k_full",
                format!("must lie in [1, {}]", self.num_experts),
            ));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err(Error::config("model.lora_alpha", "must be positive"));
        }
        if self.task == TaskKind::Classification && self.output_dim < 2 {
            return Err(Error::config("model.output_dim", "classification needs at least 2 classes"));
        }
        Ok(())
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_dim: 8,
            expert_in: 8,
            expert_out: 8,
            num_experts: 8,
            k_full: 8,
            rank: 4,
            lora_alpha: DEFAULT_LORA_ALPHA,
            output_dim: 4,
            task: TaskKind::Classification,
        }
    }
}

/// Frozen embed and head around one trainable SMoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    /// `expert_in × input_dim`
    pub embed: Matrix,
    pub smoe: SmoeLayer,
    /// `output_dim × expert_out`
    pub head: Matrix,
    pub task: TaskKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrad {
    pub a: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loras: Vec<LoraGrad>,
    pub rescaler: f64,
}

impl Gradients {
    fn zeros_like(layer: &SmoeLayer) -> Self {
        Self {
            loras: layer
                .loras
                .iter()
                .map(|l| LoraGrad {
                    a: Matrix::zeros(l.a.rows(), l.a.cols()),
                    b: Matrix::zeros(l.b.rows(), l.b.cols()),
                })
                .collect(),
            rescaler: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Gradients,
    pub decisions: Vec<RoutingDecision>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    /// Fraction correct; `None` for regression.
    pub accuracy: Option<f64>,
}

impl ToyModel {
    pub fn new(embed: Matrix, smoe: SmoeLayer, head: Matrix, task: TaskKind) -> Result<Self> {
        if embed.rows() != smoe.in_dim() {
            return Err(Error::Dimension {
                op: "ToyModel::new (embed→smoe)",
                lhs: embed.shape(),
                rhs: (smoe.out_dim(), smoe.in_dim()),
            });
        }
        if head.cols() != smoe.out_dim() {
            return Err(Error::Dimension {
                op: "ToyModel::new (smoe→head)",
                lhs: (smoe.out_dim(), smoe.in_dim()),
                rhs: head.shape(),
            });
        }
        Ok(Self {
            embed,
            smoe,
            head,
            task,
        })
    }

    /// Random frozen base with fresh LoRA adapters. Base weights are scaled by
    /// `1/sqrt(fan_in)`.
    pub fn random<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let fan = |d: usize| 1.0 / (d as f64).sqrt();
        let embed = Matrix::random_normal(spec.expert_in, spec.input_dim, fan(spec.input_dim), rng);
        let experts = (0..spec.num_experts)
            .map(|_| Matrix::random_normal(spec.expert_out, spec.expert_in, fan(spec.expert_in), rng))
            .collect();
        let router = Matrix::random_normal(spec.expert_in, spec.num_experts, 1.0, rng);
        let loras = (0..spec.num_experts)
            .map(|_| LoraPair::init(spec.expert_out, spec.expert_in, spec.rank, spec.lora_alpha, rng))
            .collect();
        let smoe = SmoeLayer::new(experts, router, loras, spec.k_full)?;
        let head = Matrix::random_normal(spec.output_dim, spec.expert_out, fan(spec.expert_out), rng);
        Self::new(embed, smoe, head, spec.task)
    }

    pub fn output_dim(&self) -> usize {
        self.head.rows()
    }

    pub fn forward(&self, x: &[f64], k_i: usize) -> Result<(Vec<f64>, RoutingDecision)> {
        let z = self.embed.matvec(x)?;
        let (h, decision) = self.smoe.forward(&z, k_i)?;
        Ok((self.head.matvec(&h)?, decision))
    }

    pub fn predict_class(&self, x: &[f64], k_i: usize) -> Result<usize> {
        let (logits, _) = self.forward(x, k_i)?;
        Ok(argmax(&logits))
    }

    fn check_target(&self, target: &Target<'_>) -> Result<()> {
        match (self.task, target) {
            (TaskKind::Classification, Target::Class(c)) if *c < self.output_dim() => Ok(()),
            (TaskKind::Regression, Target::Values(v)) if v.len() == self.output_dim() => Ok(()),
            (_, Target::Values(v)) => Err(Error::Dimension {
                op: "loss (target)",
                lhs: (self.output_dim(), 1),
                rhs: (v.len(), 1),
            }),
            (_, Target::Class(c)) => Err(Error::Dimension {
                op: "loss (class label)",
                lhs: (self.output_dim(), 1),
                rhs: (*c, 1),
            }),
        }
    }

    /// Per-example loss and its gradient with respect to the model output.
    fn output_loss(&self, output: &[f64], target: Target<'_>) -> Result<(f64, Vec<f64>)> {
        match target {
            Target::Class(c) => {
                let loss = log_sum_exp(output) - output[c];
                let mut grad = softmax(output)?;
                grad[c] -= 1.0;
                Ok((loss, grad))
            }
            Target::Values(t) => {
                let d = output.len() as f64;
                let loss = output.iter().zip(t).map(|(y, t)| (y - t).powi(2)).sum::<f64>() / d;
                let grad = output.iter().zip(t).map(|(y, t)| 2.0 * (y - t) / d).collect();
                Ok((loss, grad))
            }
        }
    }

    pub fn loss_and_grads(&self, batch: &[Sample<'_>], k_i: usize) -> Result<LossOutput> {
        loss_and_grads(self, batch, k_i)
    }

    pub fn evaluate(&self, samples: &[Sample<'_>], k_i: usize) -> Result<EvalMetrics> {
        if samples.is_empty() {
            return Err(Error::domain("evaluation on an empty set"));
        }
        let mut loss = 0.0;
        let mut correct = 0usize;
        for s in samples {
            self.check_target(&s.target)?;
            let (y, _) = self.forward(s.input, k_i)?;
            loss += self.output_loss(&y, s.target)?.0;
            if let Target::Class(c) = s.target {
                if argmax(&y) == c {
                    correct += 1;
                }
            }
        }
        let n = samples.len() as f64;
        Ok(EvalMetrics {
            loss: loss / n,
            accuracy: (self.task == TaskKind::Classification).then(|| correct as f64 / n),
        })
    }
}

/// Mean loss over the batch with analytic gradients for every LoRA factor and the rescaler.
///
/// Routing is treated as a constant selection: no gradient passes through TopK
/// and the frozen router, embed, head and expert weights receive none.
pub fn loss_and_grads(model: &ToyModel, batch: &[Sample<'_>], k_i: usize) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::domain("loss over an empty batch"));
    }
    let layer = &model.smoe;
    let inv_b = 1.0 / batch.len() as f64;
    let mut grads = Gradients::zeros_like(layer);
    let mut decisions = Vec::with_capacity(batch.len());
    let mut total = 0.0;

    for sample in batch {
        model.check_target(&sample.target)?;
        let z = model.embed.matvec(sample.input)?;
        let trace = layer.forward_traced(&z, k_i)?;
        let h: Vec<f64> = trace.mixture.iter().map(|v| v * layer.rescaler).collect();
        let y = model.head.matvec(&h)?;
        let (loss, dy) = model.output_loss(&y, sample.target)?;
        total += loss;

        let dh: Vec<f64> = model.head.matvec_t(&dy)?.into_iter().map(|v| v * inv_b).collect();
        grads.rescaler += dh.iter().zip(&trace.mixture).map(|(a, b)| a * b).sum::<f64>();

        for et in &trace.experts {
            let lora = &layer.loras[et.expert];
            let scale = lora.scaling();
            // upstream gradient at this expert's output, times the LoRA scaling
            let de: Vec<f64> = dh.iter().map(|v| v * layer.rescaler * et.gate * scale).collect();
            let g = &mut grads.loras[et.expert];
            // dA += de · (Bz)ᵀ
            for (r, der) in de.iter().enumerate() {
                for (c, u) in et.projected.iter().enumerate() {
                    let v = g.a.get(r, c) + der * u;
                    g.a.set(r, c, v);
                }
            }
            // dB += (Aᵀ de) · zᵀ
            let back = lora.a.matvec_t(&de)?;
            for (r, br) in back.iter().enumerate() {
                for (c, zc) in z.iter().enumerate() {
                    let v = g.b.get(r, c) + br * zc;
                    g.b.set(r, c, v);
                }
            }
        }
        decisions.push(trace.decision);
    }

    Ok(LossOutput {
        loss: total * inv_b,
        grads,
        decisions,
    })
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec(task: TaskKind) -> ModelSpec {
        ModelSpec {
            input_dim: 4,
            expert_in: 4,
            expert_out: 4,
            num_experts: 3,
            k_full: 3,
            rank: 2,
            lora_alpha: 16.0,
            output_dim: 3,
            task,
        }
    }

    #[test]
    fn exact_fit_has_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ToyModel::random(&small_spec(TaskKind::Regression), &mut rng).unwrap();
        let x = [0.3, -0.2, 0.9, 0.1];
        let (y, _) = model.forward(&x, 2).unwrap();
        let batch = [Sample {
            input: &x,
            target: Target::Values(&y),
        }];
        let out = model.loss_and_grads(&batch, 2).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.grads.rescaler, 0.0);
        for g in &out.grads.loras {
            assert_eq!(g.a.max_abs(), 0.0);
            assert_eq!(g.b.max_abs(), 0.0);
        }
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = ToyModel::random(&small_spec(TaskKind::Classification), &mut rng).unwrap();
        model.head = Matrix::zeros(3, 4);
        let x = [1.0, 2.0, 3.0, 4.0];
        let batch = [Sample {
            input: &x,
            target: Target::Class(1),
        }];
        let out = model.loss_and_grads(&batch, 1).unwrap();
        assert!((out.loss - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn empty_batch_and_bad_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = ToyModel::random(&small_spec(TaskKind::Classification), &mut rng).unwrap();
        assert!(matches!(model.loss_and_grads(&[], 1), Err(Error::Domain(_))));
        let x = [0.0; 4];
        let bad = [Sample {
            input: &x,
            target: Target::Class(7),
        }];
        assert!(matches!(model.loss_and_grads(&bad, 1), Err(Error::Dimension { .. })));
        let wrong_kind = [Sample {
            input: &x,
            target: Target::Values(&[1.0, 2.0]),
        }];
        assert!(matches!(model.loss_and_grads(&wrong_kind, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn decisions_have_requested_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = ToyModel::random(&small_spec(TaskKind::Classification), &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..5).map(|_| Matrix::random_normal(4, 1, 1.0, &mut rng).into_vec()).collect();
        let batch: Vec<Sample> = xs
            .iter()
            .map(|x| Sample {
                input: x,
                target: Target::Class(0),
            })
            .collect();
        let out = model.loss_and_grads(&batch, 2).unwrap();
        assert_eq!(out.decisions.len(), 5);
        assert!(out.decisions.iter().all(|d| d.selected.len() == 2));
        // frozen router: identical input, identical decision
        let again = model.loss_and_grads(&batch, 2).unwrap();
        assert_eq!(out.decisions, again.decisions);
    }
}
