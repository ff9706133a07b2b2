//! SGD, Adam (L2 via the gradient) and AdamW (decoupled decay), with linear
//! per-step warmup over the first `warmup_epochs` epochs.

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            "adamw" => Some(OptimizerKind::AdamW),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
}

impl OptimizerSpec {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_epochs: 0,
            clip_norm: None,
        }
    }
}

/// Learning rate for the 1-based `step` given the number of optimizer steps in
/// one epoch.
pub fn effective_learning_rate(spec: &OptimizerSpec, step: u64, steps_per_epoch: usize) -> f64 {
    let warmup_steps = spec.warmup_epochs as u64 * steps_per_epoch as u64;
    if warmup_steps > 0 && step <= warmup_steps {
        spec.learning_rate * (step as f64 / warmup_steps as f64).min(1.0)
    } else {
        spec.learning_rate
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    spec: OptimizerSpec,
    steps_per_epoch: usize,
    steps: u64,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, steps_per_epoch: usize) -> Self {
        Self { spec, steps_per_epoch: steps_per_epoch.max(1), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    /// Applies one update to every trainable parameter using its stored grad.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.steps += 1;
        let t = self.steps;
        let spec = self.spec;
        let lr = effective_learning_rate(&spec, t, self.steps_per_epoch);

        let clip_scale = spec.clip_norm.map_or(1.0, |max| {
            let norm = store
                .iter()
                .filter(|(_, p)| p.trainable)
                .flat_map(|(_, p)| p.grad.data().iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        });

        let bc1 = 1.0 - spec.beta1.powi(t as i32);
        let bc2 = 1.0 - spec.beta2.powi(t as i32);
        for (_, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            match spec.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        let g = g * clip_scale + spec.weight_decay * *w;
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam | OptimizerKind::AdamW => {
                    let decoupled = spec.kind == OptimizerKind::AdamW;
                    let (m, v) = p.moments.get_or_insert_with(|| {
                        (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape()))
                    });
                    let values = p.value.data_mut();
                    for i in 0..values.len() {
                        let mut g = p.grad.data()[i] * clip_scale;
                        if decoupled {
                            values[i] -= lr * spec.weight_decay * values[i];
                        } else {
                            g += spec.weight_decay * values[i];
                        }
                        let mi = &mut m.data_mut()[i];
                        *mi = spec.beta1 * *mi + (1.0 - spec.beta1) * g;
                        let vi = &mut v.data_mut()[i];
                        *vi = spec.beta2 * *vi + (1.0 - spec.beta2) * g * g;
                        let m_hat = m.data()[i] / bc1;
                        let v_hat = v.data()[i] / bc2;
                        values[i] -= lr * m_hat / (v_hat.sqrt() + spec.eps);
                    }
                }
            }
        }
    }
}
