use serde::{Deserialize, Serialize};

use crate::model::smoe::RoutingDecision;

/// What one unit of `steps` means for the activation counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountingMode {
    /// One tick per optimizer step; an expert scores at most once per step.
    #[default]
    PerStep,
    /// One tick per routed example.
    PerToken,
}

/// Expert activation tallies `a^j` over `S` steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationCounter {
    pub counts: Vec<u64>,
    pub steps: u64,
    pub mode: CountingMode,
}

impl ActivationCounter {
    pub fn new(num_experts: usize) -> Self {
        Self::with_mode(num_experts, CountingMode::PerStep)
    }

    pub fn with_mode(num_experts: usize, mode: CountingMode) -> Self {
        Self {
            counts: vec![0; num_experts],
            steps: 0,
            mode,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.counts.len()
    }

    /// Folds one optimizer step's routing decisions into the tallies.
    pub fn record_step(&mut self, decisions: &[RoutingDecision]) {
        match self.mode {
            CountingMode::PerStep => {
                let mut hit = vec![false; self.counts.len()];
                for d in decisions {
                    for &j in &d.selected {
                        hit[j] = true;
                    }
                }
                for (c, h) in self.counts.iter_mut().zip(hit) {
                    *c += u64::from(h);
                }
                self.steps += 1;
            }
            CountingMode::PerToken => {
                for d in decisions {
                    for &j in &d.selected {
                        self.counts[j] += 1;
                    }
                }
                self.steps += decisions.len() as u64;
            }
        }
    }

    /// `a^j / S`, all zeros when no step has been recorded.
    pub fn frequencies(&self) -> Vec<f64> {
        if self.steps == 0 {
            return vec![0.0; self.counts.len()];
        }
        let s = self.steps as f64;
        self.counts.iter().map(|&c| c as f64 / s).collect()
    }
}

/// Free-function form of [`ActivationCounter::record_step`].
pub fn record_activations(mut counter: ActivationCounter, decisions: &[RoutingDecision]) -> ActivationCounter {
    counter.record_step(decisions);
    counter
}
