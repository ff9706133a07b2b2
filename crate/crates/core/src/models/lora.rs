//! Low-rank adapters for frozen linear layers.
//!
//! A layer with weight `W` (`n_out × n_in`) gains `down` (`r × n_in`) and
//! `up` (`n_out × r`); the output becomes `W x + (alpha / r) · up (down x)`.
//! `up` starts at zero so the adapted layer is exactly the base layer until
//! training moves it.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{self, Rng};
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};

pub const DOWN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { r: 8, alpha: 16.0, dropout: 0.05 }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.r as f64
    }
}

/// A linear layer eligible for adaptation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoraTarget {
    /// Name of the weight parameter (`n_out × n_in`).
    pub weight: String,
    pub n_out: usize,
    pub n_in: usize,
}

impl LoraTarget {
    pub fn down_name(&self) -> String {
        down_name(&self.weight)
    }

    pub fn up_name(&self) -> String {
        up_name(&self.weight)
    }

    /// Adapter scalars added for this target: `r · (n_in + n_out)`.
    pub fn adapter_params(&self, r: usize) -> usize {
        r * (self.n_in + self.n_out)
    }
}

pub fn down_name(weight: &str) -> String {
    format!("{weight}.lora_down")
}

pub fn up_name(weight: &str) -> String {
    format!("{weight}.lora_up")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PeftStatus {
    /// Adapters were injected on the listed weights.
    Applied { targets: Vec<String> },
    /// No eligible layer; training proceeds as full fine-tuning.
    Fallback { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeftReport {
    pub status: PeftStatus,
    pub trainable_params: usize,
    pub total_params: usize,
}

impl PeftReport {
    pub fn is_fallback(&self) -> bool {
        matches!(self.status, PeftStatus::Fallback { .. })
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_params as f64 / self.total_params.max(1) as f64
    }
}

/// Injects adapters on `targets`, freezes every other parameter except those
/// named in `keep_trainable`.
pub fn inject(
    store: &mut ParamStore,
    targets: &[LoraTarget],
    keep_trainable: &[String],
    cfg: &LoraConfig,
    seed: u64,
) -> Result<PeftReport, TensorError> {
    if targets.is_empty() {
        return Ok(PeftReport {
            status: PeftStatus::Fallback { reason: "model exposes no attention projection layers".into() },
            trainable_params: store.n_trainable(),
            total_params: store.n_params(),
        });
    }
    store.freeze_all();
    for name in keep_trainable {
        store.set_trainable(name, true)?;
    }
    let mut rng = rng::stream(seed, "lora-init");
    let normal = Normal::new(0.0, DOWN_INIT_STD).expect("valid std");
    for t in targets {
        let w = store.value(&t.weight)?;
        if w.shape() != [t.n_out, t.n_in] {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "lora inject",
                detail: format!("{} is {:?}, expected [{}, {}]", t.weight, w.shape(), t.n_out, t.n_in),
            });
        }
        let down: Vec<f64> = (0..cfg.r * t.n_in).map(|_| normal.sample(&mut rng)).collect();
        store.insert(t.down_name(), Tensor::matrix(cfg.r, t.n_in, down), true);
        store.insert(t.up_name(), Tensor::zeros(&[t.n_out, cfg.r]), true);
    }
    Ok(PeftReport {
        status: PeftStatus::Applied { targets: targets.iter().map(|t| t.weight.clone()).collect() },
        trainable_params: store.n_trainable(),
        total_params: store.n_params(),
    })
}

/// Inverted-dropout keep mask scaled by `1 / (1 - rate)`.
fn dropout_mask(rng: &mut Rng, shape: &[usize], rate: f64) -> Tensor {
    let keep = 1.0 - rate;
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
    }
    t
}

/// `x Wᵀ` plus the adapter path when the store holds adapters for `weight`.
/// Dropout applies to `x downᵀ` only when `dropout_rng` is given.
pub fn linear(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    weight: &str,
    cfg: Option<&LoraConfig>,
    dropout_rng: Option<&mut Rng>,
) -> Result<Var, TensorError> {
    let w = tape.param(store, weight)?;
    let base = tape.matmul_nt(x, w)?;
    let (Some(cfg), true) = (cfg, store.contains(&down_name(weight))) else {
        return Ok(base);
    };
    let down = tape.param(store, &down_name(weight))?;
    let up = tape.param(store, &up_name(weight))?;
    let mut hidden = tape.matmul_nt(x, down)?;
    if let Some(rng) = dropout_rng {
        if cfg.dropout > 0.0 {
            let mask = dropout_mask(rng, tape.value(hidden).shape(), cfg.dropout);
            let m = tape.constant(mask);
            hidden = tape.mul(hidden, m)?;
        }
    }
    let delta = tape.matmul_nt(hidden, up)?;
    let delta = tape.scale(delta, cfg.scaling())?;
    tape.add(base, delta)
}

/// A standalone adapter for one layer, evaluated without a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub down: Tensor,
    pub up: Tensor,
    pub config: LoraConfig,
}

impl LoraAdapter {
    /// `(alpha / r) · up · down`, shaped like the base weight.
    pub fn delta_weight(&self) -> Result<Tensor, TensorError> {
        let s = self.config.scaling();
        Ok(self.up.matmul(&self.down)?.map(|v| v * s))
    }

    /// `h = W x + (alpha / r) · up (down x)` for a single input vector.
    pub fn forward(&self, w: &Tensor, x: &[f64], train_mode: bool, rng: &mut Rng) -> Result<Vec<f64>, TensorError> {
        let n_in = x.len();
        let xt = Tensor::matrix(1, n_in, x.to_vec());
        if w.cols() != n_in || self.down.cols() != n_in || self.up.rows() != w.rows() || self.up.cols() != self.down.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "lora_forward",
                detail: format!("W {:?} down {:?} up {:?} x {n_in}", w.shape(), self.down.shape(), self.up.shape()),
            });
        }
        let base = xt.matmul_nt(w)?;
        let mut hidden = xt.matmul_nt(&self.down)?;
        if train_mode && self.config.dropout > 0.0 {
            let mask = dropout_mask(rng, hidden.shape(), self.config.dropout);
            for (h, m) in hidden.data_mut().iter_mut().zip(mask.data()) {
                *h *= m;
            }
        }
        let delta = hidden.matmul_nt(&self.up)?;
        let s = self.config.scaling();
        Ok(base.data().iter().zip(delta.data()).map(|(b, d)| b + s * d).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_arithmetic_rank_one() {
        let adapter = LoraAdapter {
            target: "w".into(),
            down: Tensor::matrix(1, 2, vec![1.0, 0.0]),
            up: Tensor::matrix(2, 1, vec![1.0, 0.0]),
            config: LoraConfig { r: 1, alpha: 16.0, dropout: 0.05 },
        };
        let w = Tensor::zeros(&[2, 2]);
        let mut rng = crate::rng::from_seed(0);
        assert_eq!(adapter.forward(&w, &[3.0, 5.0], false, &mut rng).unwrap(), vec![48.0, 0.0]);
    }

    #[test]
    fn zero_up_is_base_layer() {
        let w = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.3, 1.2, 0.5, -0.7]);
        let adapter = LoraAdapter {
            target: "w".into(),
            down: Tensor::matrix(8, 3, (0..24).map(|i| i as f64 * 0.01).collect()),
            up: Tensor::zeros(&[2, 8]),
            config: LoraConfig::default(),
        };
        let mut rng = crate::rng::from_seed(0);
        let x = [0.3, -2.0, 1.5];
        let base = Tensor::matrix(1, 3, x.to_vec()).matmul_nt(&w).unwrap();
        assert_eq!(adapter.forward(&w, &x, true, &mut rng).unwrap(), base.data());
        assert!(adapter.delta_weight().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_ignores_rng() {
        let w = Tensor::matrix(1, 2, vec![0.5, 0.5]);
        let adapter = LoraAdapter {
            target: "w".into(),
            down: Tensor::matrix(2, 2, vec![0.3, 0.1, -0.2, 0.4]),
            up: Tensor::matrix(1, 2, vec![0.7, -0.3]),
            config: LoraConfig { r: 2, alpha: 4.0, dropout: 0.5 },
        };
        let a = adapter.forward(&w, &[1.0, 2.0], false, &mut crate::rng::from_seed(1)).unwrap();
        let b = adapter.forward(&w, &[1.0, 2.0], false, &mut crate::rng::from_seed(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch() {
        let adapter = LoraAdapter {
            target: "w".into(),
            down: Tensor::zeros(&[2, 3]),
            up: Tensor::zeros(&[2, 2]),
            config: LoraConfig { r: 2, alpha: 4.0, dropout: 0.0 },
        };
        let w = Tensor::zeros(&[2, 2]);
        assert!(adapter.forward(&w, &[1.0, 2.0], false, &mut crate::rng::from_seed(0)).is_err());
    }

    #[test]
    fn inject_counts_and_freezes() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::zeros(&[4, 6]), true);
        store.insert("head.w", Tensor::zeros(&[2, 4]), true);
        let targets = [LoraTarget { weight: "a.w".into(), n_out: 4, n_in: 6 }];
        let report = inject(&mut store, &targets, &["head.w".to_string()], &LoraConfig::default(), 0).unwrap();
        assert_eq!(report.trainable_params, 8 * (4 + 6) + 8);
        assert_eq!(report.total_params, 24 + 8 + 80);
        assert!(!store.get("a.w").unwrap().trainable);
        let none = inject(&mut store, &[], &[], &LoraConfig::default(), 0).unwrap();
        assert!(none.is_fallback());
    }
}
