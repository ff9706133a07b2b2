//! Pipeline configuration and its flat dotted-key text form.
//!
//! ```toml
//! model_name = "minicl"
//! tuning_strategy = "peft"
//! seed = 7
//! tuning_params.finetune_mode = "meta-learning"
//! tuning_params.peft_config.r = 8
//! sampling.method = "smote"
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::models::{registry, ModelSpec};
use crate::resample::{ResampleMethod, ResampleSpec};
use crate::rng;
use crate::tuning::{FinetuneMode, TuningConfig, TuningStrategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub method: ResampleMethod,
    /// Method default when unset.
    pub k_neighbors: Option<usize>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { method: ResampleMethod::None, k_neighbors: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model_name: String,
    pub tuning_strategy: TuningStrategy,
    /// Overrides keyed without the `tuning_params.` prefix.
    pub tuning_params: BTreeMap<String, String>,
    pub sampling: SamplingConfig,
    pub seed: u64,
}

fn scalar_text(key: &str, value: &toml::Value) -> Result<String, PipelineError> {
    match value {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        toml::Value::Boolean(b) => Ok(b.to_string()),
        other => Err(PipelineError::Config(format!("`{key}` must be a scalar, got {}", other.type_str()))),
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) -> Result<(), PipelineError> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            other => out.push((key.clone(), scalar_text(&key, other)?)),
        }
    }
    Ok(())
}

/// Dotted `key -> text` pairs from a TOML document.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, PipelineError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
    let mut out = Vec::new();
    flatten("", &table, &mut out)?;
    Ok(out)
}

/// Bare when the text reads back unchanged as a TOML number, else quoted.
fn toml_scalar(value: &str) -> String {
    let bare = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|t| t.get("v").cloned())
        .filter(|v| v.is_integer() || v.is_float())
        .is_some_and(|v| scalar_text("v", &v).is_ok_and(|s| s == value));
    if bare {
        value.to_string()
    } else {
        toml::Value::String(value.to_string()).to_string()
    }
}

impl PipelineConfig {
    pub fn new(model_name: &str, tuning_strategy: TuningStrategy) -> Self {
        Self {
            model_name: model_name.to_string(),
            tuning_strategy,
            tuning_params: BTreeMap::new(),
            sampling: SamplingConfig::default(),
            seed: 0,
        }
    }

    pub fn with_param(mut self, key: &str, value: &str) -> Result<Self, PipelineError> {
        self.set(&format!("tuning_params.{key}"), value)?;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_sampling(mut self, method: ResampleMethod) -> Self {
        self.sampling.method = method;
        self
    }

    /// Sets one dotted key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let invalid = |what: &str| PipelineError::Config(format!("invalid value `{value}` for `{key}`: {what}"));
        match key {
            "model_name" => self.model_name = value.to_string(),
            "tuning_strategy" => {
                self.tuning_strategy = TuningStrategy::parse(value).ok_or_else(|| invalid("expected inference, finetune or peft"))?
            }
            "seed" => self.seed = value.trim().parse().map_err(|_| invalid("expected an unsigned integer"))?,
            "sampling.method" => self.sampling.method = ResampleMethod::parse(value).map_err(|e| invalid(&e.to_string()))?,
            "sampling.k_neighbors" => {
                self.sampling.k_neighbors = Some(value.trim().parse().map_err(|_| invalid("expected a positive integer"))?)
            }
            _ => {
                let Some(param) = key.strip_prefix("tuning_params.") else {
                    return Err(PipelineError::UnknownConfigKey(key.to_string()));
                };
                // validate key and value eagerly against a scratch config
                TuningConfig::base(TuningStrategy::Finetune, FinetuneMode::Sft, 0).set(param, value).map_err(|e| match e {
                    crate::tuning::TuningError::UnknownKey(_) => PipelineError::UnknownConfigKey(key.to_string()),
                    other => PipelineError::Config(other.to_string()),
                })?;
                self.tuning_params.insert(param.to_string(), value.to_string());
            }
        }
        Ok(())
    }

    /// Applies pairs in order.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<(), PipelineError> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        Self::from_table(&table)
    }

    /// Builds from an already parsed table; `model_name` is required.
    pub fn from_table(table: &toml::Table) -> Result<Self, PipelineError> {
        let mut pairs = Vec::new();
        flatten("", table, &mut pairs)?;
        let mut cfg = Self::new("", TuningStrategy::Inference);
        cfg.apply(&pairs)?;
        if cfg.model_name.is_empty() {
            return Err(PipelineError::Config("`model_name` is required".into()));
        }
        Ok(cfg)
    }

    /// Dotted-key TOML that `from_toml_str` reads back to an equal config.
    pub fn to_toml_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("model_name = {}\n", toml::Value::String(self.model_name.clone())));
        out.push_str(&format!("tuning_strategy = \"{}\"\n", self.tuning_strategy.as_str()));
        out.push_str(&format!("seed = {}\n", self.seed));
        for (k, v) in &self.tuning_params {
            out.push_str(&format!("tuning_params.{k} = {}\n", toml_scalar(v)));
        }
        out.push_str(&format!("sampling.method = \"{}\"\n", self.sampling.method.as_str()));
        if let Some(k) = self.sampling.k_neighbors {
            out.push_str(&format!("sampling.k_neighbors = {k}\n"));
        }
        out
    }

    pub fn spec(&self) -> Result<&'static ModelSpec, PipelineError> {
        Ok(registry::lookup(&self.model_name)?)
    }

    pub fn finetune_mode(&self) -> Result<FinetuneMode, PipelineError> {
        match self.tuning_params.get("finetune_mode") {
            None => Ok(FinetuneMode::Sft),
            Some(v) => FinetuneMode::parse(v).ok_or_else(|| PipelineError::Config(format!("invalid finetune_mode `{v}`"))),
        }
    }

    /// Registry defaults for the model and strategy, then these overrides.
    pub fn resolve_tuning(&self) -> Result<TuningConfig, PipelineError> {
        let spec = self.spec()?;
        let overrides: Vec<(String, String)> = self.tuning_params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let cfg = TuningConfig::resolve(spec, self.tuning_strategy, self.finetune_mode()?, self.seed, &overrides)?;
        spec.check(cfg.registry_strategy())?;
        Ok(cfg)
    }

    pub fn resample_spec(&self) -> ResampleSpec {
        let mut spec = ResampleSpec::new(self.sampling.method, rng::derive_seed(self.seed, self.sampling.method.as_str()));
        if let Some(k) = self.sampling.k_neighbors {
            spec.k_neighbors = k;
        }
        spec
    }

    /// `inference`, or `strategy-mode` such as `finetune-meta-learning`.
    pub fn strategy_label(&self) -> String {
        match (self.tuning_strategy, self.finetune_mode()) {
            (TuningStrategy::Inference, _) => "inference".to_string(),
            (s, Ok(mode)) => format!("{}-{}", s.as_str(), mode.as_str()),
            (s, Err(_)) => s.as_str().to_string(),
        }
    }

    /// Default leaderboard label: `model-strategy[-mode]`.
    pub fn display_name(&self) -> String {
        format!("{}-{}", self.model_name, self.strategy_label())
    }
}
