//! The model interface, the MiniICL in-context learner, two classical
//! baselines, low-rank adapters, and the registry.

mod knn;
mod logistic;
pub mod lora;
mod minicl;
pub mod registry;

pub use knn::Knn;
pub use logistic::Logistic;
pub use lora::{LoraAdapter, LoraConfig, LoraTarget, PeftReport, PeftStatus};
pub use minicl::{MiniIcl, MiniIclConfig};
pub use registry::{build_model, lookup, Capabilities, ModelSpec, Strategy, Support, CATALOG};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::FeatureMatrix;
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tape, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{k} classes exceed the model's maximum of {k_max}")]
    TooManyClasses { k: usize, k_max: usize },
    #[error("support set is empty")]
    EmptySupport,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("model has no context; fit it first")]
    NotFitted,
    #[error("expected {expected} feature columns, got {got}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("label {label} is outside 0..{n_classes}")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("model `{0}` is listed for reference only and cannot be trained here")]
    NotRunnable(String),
    #[error("unsupported strategy: model `{model}` does not support {strategy}")]
    UnsupportedStrategy { model: String, strategy: String },
    #[error("{model} cannot consume {batch} batches")]
    UnsupportedBatch { model: &'static str, batch: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How a model uses training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelFamily {
    /// Conditions on labeled support rows at prediction time.
    InContext,
    /// Learns weights; keeps no rows.
    Parametric,
    /// Memorizes rows; has no weights.
    Instance,
}

/// Labeled rows a model conditions on at prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextState {
    pub x: FeatureMatrix,
    pub y: Vec<usize>,
    pub n_classes: usize,
}

impl ContextState {
    pub fn new(x: FeatureMatrix, y: Vec<usize>, n_classes: usize) -> Result<Self, ModelError> {
        if x.rows != y.len() {
            return Err(TensorError::ShapeMismatch {
                op: "context",
                detail: format!("{} rows vs {} labels", x.rows, y.len()),
            }
            .into());
        }
        if let Some(&label) = y.iter().find(|&&l| l >= n_classes) {
            return Err(ModelError::LabelOutOfRange { label, n_classes });
        }
        Ok(Self { x, y, n_classes })
    }
}

/// One unit of training data for a loss evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    /// Labels are already remapped to `0..n_classes`.
    Episode {
        support_x: &'a FeatureMatrix,
        support_y: &'a [usize],
        query_x: &'a FeatureMatrix,
        query_y: &'a [usize],
        n_classes: usize,
    },
    Supervised { x: &'a FeatureMatrix, y: &'a [usize] },
}

/// A trainable or memorizing classifier over preprocessed feature rows.
pub trait Model: Send + Sync {
    fn name(&self) -> &str;

    fn family(&self) -> ModelFamily;

    fn n_features(&self) -> usize;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    fn context(&self) -> Option<&ContextState>;

    fn set_context(&mut self, ctx: ContextState) -> Result<(), ModelError>;

    /// Scalar loss recorded on `tape`. `train_rng` enables dropout.
    fn loss(&self, tape: &mut Tape, batch: Batch<'_>, train_rng: Option<&mut Rng>) -> Result<Var, ModelError>;

    /// Per-row class probabilities, each row of length `n_classes`.
    fn predict_proba(&self, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>, ModelError>;

    /// Linear layers eligible for adapters; empty when none exist.
    fn lora_targets(&self) -> Vec<LoraTarget> {
        Vec::new()
    }

    /// Parameters that stay trainable while adapters are attached.
    fn head_params(&self) -> Vec<String> {
        Vec::new()
    }

    fn lora(&self) -> Option<LoraConfig> {
        None
    }

    fn set_lora(&mut self, _cfg: Option<LoraConfig>) {}

    fn clone_box(&self) -> Box<dyn Model>;
}

impl Clone for Box<dyn Model> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Attaches adapters to every eligible layer, or reports a fallback and
/// leaves the parameters untouched.
pub fn attach_lora(model: &mut dyn Model, cfg: &LoraConfig, seed: u64) -> Result<PeftReport, ModelError> {
    let targets = model.lora_targets();
    let head = model.head_params();
    let report = lora::inject(model.params_mut(), &targets, &head, cfg, seed)?;
    if !report.is_fallback() {
        model.set_lora(Some(*cfg));
    }
    Ok(report)
}

pub(crate) fn check_width(x: &FeatureMatrix, expected: usize) -> Result<(), ModelError> {
    if x.cols != expected {
        return Err(ModelError::FeatureWidth { expected, got: x.cols });
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn context_validates_labels() {
        let x = FeatureMatrix::zeros(2, 1);
        assert!(ContextState::new(x.clone(), vec![0, 2], 2).is_err());
        assert!(ContextState::new(x.clone(), vec![0], 2).is_err());
        assert!(ContextState::new(x, vec![0, 1], 2).is_ok());
    }
}
