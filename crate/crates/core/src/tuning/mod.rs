//! Training controller for zero-shot, supervised fine-tuning, episodic
//! meta-learning, and their low-rank-adapter variants.

pub mod episode;

pub use episode::{contiguous_map, sample_episode, Episode, Sampled};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::FeatureMatrix;
use crate::models::{self, registry, Batch, ContextState, LoraConfig, Model, ModelError, ModelFamily, ModelSpec, PeftReport, Strategy};
use crate::rng::{self, Rng};
use crate::tensor::{Optimizer, OptimizerKind, OptimizerSpec, Tape, TensorError};

/// Meta-learning gives up after this many sampling attempts per requested
/// episode within one epoch.
pub const SKIP_BUDGET_FACTOR: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum TuningError {
    #[error("episode needs {support} support + {query} query rows but only {rows} are available")]
    InfeasibleEpisode { support: usize, query: usize, rows: usize },
    #[error("every batch was skipped after {attempts} attempts (query classes absent from support)")]
    AllBatchesSkipped { attempts: usize },
    #[error("unknown tuning key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for TuningError {
    fn from(e: TensorError) -> Self {
        TuningError::Model(ModelError::Tensor(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TuningStrategy {
    Inference,
    Finetune,
    Peft,
}

impl TuningStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            TuningStrategy::Inference => "inference",
            TuningStrategy::Finetune => "finetune",
            TuningStrategy::Peft => "peft",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "inference" | "zero-shot" => Some(TuningStrategy::Inference),
            "finetune" => Some(TuningStrategy::Finetune),
            "peft" => Some(TuningStrategy::Peft),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinetuneMode {
    Sft,
    MetaLearning,
}

impl FinetuneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneMode::Sft => "sft",
            FinetuneMode::MetaLearning => "meta-learning",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sft" => Some(FinetuneMode::Sft),
            "meta-learning" | "meta_learning" | "meta" => Some(FinetuneMode::MetaLearning),
            _ => None,
        }
    }
}

/// Registry strategy for a (strategy, mode) pair.
pub fn resolve_strategy(strategy: TuningStrategy, mode: FinetuneMode) -> Strategy {
    match (strategy, mode) {
        (TuningStrategy::Inference, _) => Strategy::Inference,
        (TuningStrategy::Finetune, FinetuneMode::Sft) => Strategy::Sft,
        (TuningStrategy::Finetune, FinetuneMode::MetaLearning) => Strategy::Meta,
        (TuningStrategy::Peft, FinetuneMode::Sft) => Strategy::PeftSft,
        (TuningStrategy::Peft, FinetuneMode::MetaLearning) => Strategy::PeftMeta,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningConfig {
    pub strategy: TuningStrategy,
    pub finetune_mode: FinetuneMode,
    pub epochs: usize,
    pub learning_rate: f64,
    /// `None` trains on the full set in one batch.
    pub batch_size: Option<usize>,
    pub support_size: usize,
    pub query_size: usize,
    pub n_episodes: usize,
    /// Query share of a pseudo-episode; the half split applies when unset.
    pub query_set_ratio: Option<f64>,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub clip_norm: Option<f64>,
    pub softmax_temperature: f64,
    pub peft: LoraConfig,
    pub seed: u64,
}

impl TuningConfig {
    /// Values used before any registry or user override.
    pub fn base(strategy: TuningStrategy, finetune_mode: FinetuneMode, seed: u64) -> Self {
        Self {
            strategy,
            finetune_mode,
            epochs: 5,
            learning_rate: 1e-3,
            batch_size: Some(16),
            support_size: 48,
            query_size: 32,
            n_episodes: 1000,
            query_set_ratio: None,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            warmup_epochs: 0,
            clip_norm: None,
            softmax_temperature: 0.9,
            peft: LoraConfig::default(),
            seed,
        }
    }

    /// Base values, then the model's registry defaults for the chosen
    /// strategy, then `overrides` in order.
    pub fn resolve(
        spec: &ModelSpec,
        strategy: TuningStrategy,
        finetune_mode: FinetuneMode,
        seed: u64,
        overrides: &[(String, String)],
    ) -> Result<Self, TuningError> {
        let mut cfg = Self::base(strategy, finetune_mode, seed);
        let inner = match finetune_mode {
            FinetuneMode::Sft => "sft",
            FinetuneMode::MetaLearning => "meta",
        };
        let mut sections = vec!["inference"];
        match strategy {
            TuningStrategy::Inference => {}
            TuningStrategy::Finetune => sections.push(inner),
            TuningStrategy::Peft => sections.extend([inner, "peft"]),
        }
        for section in sections {
            for (k, v) in spec.defaults_for(section).unwrap_or(&[]) {
                cfg.set(k, v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn registry_strategy(&self) -> Strategy {
        resolve_strategy(self.strategy, self.finetune_mode)
    }

    pub fn optimizer_spec(&self) -> OptimizerSpec {
        let mut spec = OptimizerSpec::new(self.optimizer, self.learning_rate);
        spec.weight_decay = self.weight_decay;
        spec.warmup_epochs = self.warmup_epochs;
        spec.clip_norm = self.clip_norm;
        spec
    }

    /// Sets one dotted key (without the `tuning_params.` prefix).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TuningError> {
        let bad = |reason: &str| TuningError::InvalidValue { key: key.into(), value: value.into(), reason: reason.into() };
        let count = || value.trim().parse::<usize>().map_err(|_| bad("expected a non-negative integer"));
        let real = || {
            value.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad("expected a finite number"))
        };
        match key {
            "tuning_strategy" | "strategy" => {
                self.strategy = TuningStrategy::parse(value).ok_or_else(|| bad("expected inference, finetune or peft"))?
            }
            "finetune_mode" => {
                self.finetune_mode = FinetuneMode::parse(value).ok_or_else(|| bad("expected sft or meta-learning"))?
            }
            "epochs" => self.epochs = count()?,
            "learning_rate" => self.learning_rate = real()?,
            "batch_size" => {
                self.batch_size = if value.trim().eq_ignore_ascii_case("full") { None } else { Some(count()?) }
            }
            "support_size" => self.support_size = count()?,
            "query_size" => self.query_size = count()?,
            "n_episodes" => self.n_episodes = count()?,
            "query_set_ratio" => {
                self.query_set_ratio = if value.trim().eq_ignore_ascii_case("none") { None } else { Some(real()?) }
            }
            "optimizer" => self.optimizer = OptimizerKind::parse(value.trim()).ok_or_else(|| bad("expected sgd, adam or adamw"))?,
            "weight_decay" => self.weight_decay = real()?,
            "warmup_epochs" => self.warmup_epochs = count()?,
            "clip_norm" => self.clip_norm = if value.trim().eq_ignore_ascii_case("none") { None } else { Some(real()?) },
            "softmax_temperature" => self.softmax_temperature = real()?,
            "peft_config.r" => self.peft.r = count()?,
            "peft_config.lora_alpha" => self.peft.alpha = real()?,
            "peft_config.lora_dropout" => self.peft.dropout = real()?,
            "seed" => self.seed = value.trim().parse().map_err(|_| bad("expected an unsigned 64-bit integer"))?,
            _ => return Err(TuningError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every tunable key with a value `set` accepts.
    pub fn entries(&self) -> Vec<(String, String)> {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |v| v.to_string());
        vec![
            ("finetune_mode".into(), self.finetune_mode.as_str().into()),
            ("epochs".into(), self.epochs.to_string()),
            ("learning_rate".into(), self.learning_rate.to_string()),
            ("batch_size".into(), self.batch_size.map_or("full".to_string(), |b| b.to_string())),
            ("support_size".into(), self.support_size.to_string()),
            ("query_size".into(), self.query_size.to_string()),
            ("n_episodes".into(), self.n_episodes.to_string()),
            ("query_set_ratio".into(), opt(self.query_set_ratio)),
            ("optimizer".into(), self.optimizer.as_str().into()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("warmup_epochs".into(), self.warmup_epochs.to_string()),
            ("clip_norm".into(), opt(self.clip_norm)),
            ("softmax_temperature".into(), self.softmax_temperature.to_string()),
            ("peft_config.r".into(), self.peft.r.to_string()),
            ("peft_config.lora_alpha".into(), self.peft.alpha.to_string()),
            ("peft_config.lora_dropout".into(), self.peft.dropout.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<(), TuningError> {
        let bad = |key: &str, value: String, reason: &str| {
            Err(TuningError::InvalidValue { key: key.into(), value, reason: reason.into() })
        };
        if self.learning_rate <= 0.0 {
            return bad("learning_rate", self.learning_rate.to_string(), "must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", self.weight_decay.to_string(), "must be non-negative");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size", "0".into(), "must be at least 1");
        }
        if self.support_size == 0 || self.query_size == 0 {
            return bad("support_size", format!("{}/{}", self.support_size, self.query_size), "sizes must be at least 1");
        }
        if let Some(r) = self.query_set_ratio {
            if !(r > 0.0 && r < 1.0) {
                return bad("query_set_ratio", r.to_string(), "must lie in (0, 1)");
            }
        }
        if self.softmax_temperature <= 0.0 {
            return bad("softmax_temperature", self.softmax_temperature.to_string(), "must be positive");
        }
        if self.peft.r == 0 {
            return bad("peft_config.r", "0".into(), "rank must be at least 1");
        }
        if !(0.0..1.0).contains(&self.peft.dropout) {
            return bad("peft_config.lora_dropout", self.peft.dropout.to_string(), "must lie in [0, 1)");
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return bad("clip_norm", c.to_string(), "must be positive");
            }
        }
        Ok(())
    }
}

/// What a training run did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub strategy: String,
    pub optimizer_steps: u64,
    /// Batches or episodes excluded because a query class was absent from
    /// the support set.
    pub skipped: usize,
    pub losses: Vec<f64>,
    pub peft: Option<PeftReport>,
}

impl FitReport {
    fn new(strategy: Strategy) -> Self {
        Self { strategy: strategy.as_str().into(), optimizer_steps: 0, skipped: 0, losses: Vec::new(), peft: None }
    }
}

/// Runs the configured strategy after checking the capability matrix.
pub fn tune(
    model: &mut dyn Model,
    x: &FeatureMatrix,
    y: &[usize],
    n_classes: usize,
    cfg: &TuningConfig,
) -> Result<FitReport, TuningError> {
    cfg.validate()?;
    let strategy = cfg.registry_strategy();
    registry::lookup(model.name())?.check(strategy)?;
    if x.rows == 0 || x.rows != y.len() {
        return Err(TuningError::EmptyTrainingSet);
    }
    match strategy {
        Strategy::Inference => fit_zero_shot(model, x, y, n_classes),
        Strategy::Sft => train_sft(model, x, y, n_classes, cfg),
        Strategy::Meta => train_meta(model, x, y, n_classes, cfg),
        Strategy::PeftSft | Strategy::PeftMeta => train_peft(model, x, y, n_classes, cfg),
    }
}

/// Stores the training rows as context; parameters are untouched.
pub fn fit_zero_shot(model: &mut dyn Model, x: &FeatureMatrix, y: &[usize], n_classes: usize) -> Result<FitReport, TuningError> {
    if model.family() == ModelFamily::Parametric {
        return Err(ModelError::UnsupportedStrategy { model: model.name().into(), strategy: "inference".into() }.into());
    }
    model.set_context(ContextState::new(x.clone(), y.to_vec(), n_classes)?)?;
    Ok(FitReport::new(Strategy::Inference))
}

fn optimizer_step(
    model: &mut dyn Model,
    batch: Batch<'_>,
    opt: &mut Optimizer,
    dropout: &mut Rng,
    report: &mut FitReport,
) -> Result<(), TuningError> {
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, batch, Some(dropout))?;
    report.losses.push(tape.value(loss).item());
    tape.backward(loss, model.params_mut())?;
    opt.step(model.params_mut());
    report.optimizer_steps += 1;
    Ok(())
}

/// Number of query rows in a pseudo-episode of `b` rows.
pub fn pseudo_query_len(b: usize, query_set_ratio: Option<f64>) -> usize {
    match query_set_ratio {
        None => b / 2,
        Some(r) => ((b as f64 * r).round() as usize).clamp(1, b.saturating_sub(1).max(1)),
    }
}

/// Supervised fine-tuning. In-context models see each batch as a
/// pseudo-episode: the first `ceil(B/2)` rows are support, the rest query.
pub fn train_sft(
    model: &mut dyn Model,
    x: &FeatureMatrix,
    y: &[usize],
    n_classes: usize,
    cfg: &TuningConfig,
) -> Result<FitReport, TuningError> {
    let mut report = FitReport::new(Strategy::Sft);
    let family = model.family();
    if family == ModelFamily::Instance {
        model.set_context(ContextState::new(x.clone(), y.to_vec(), n_classes)?)?;
        return Ok(report);
    }
    let n = x.rows;
    let b = cfg.batch_size.unwrap_or(n).min(n).max(1);
    let steps_per_epoch = n.div_ceil(b);
    let mut opt = Optimizer::new(cfg.optimizer_spec(), steps_per_epoch);
    let mut shuffle = rng::stream(cfg.seed, "sft-shuffle");
    let mut dropout = rng::stream(cfg.seed, "dropout");
    let mut attempted = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle);
        for chunk in order.chunks(b) {
            attempted += 1;
            match family {
                ModelFamily::InContext => {
                    let n_query = pseudo_query_len(chunk.len(), cfg.query_set_ratio);
                    let (support, query) = chunk.split_at(chunk.len() - n_query);
                    let Some(ep) = (!query.is_empty())
                        .then(|| Episode::from_parts(y, support.to_vec(), query.to_vec()))
                        .flatten()
                    else {
                        report.skipped += 1;
                        continue;
                    };
                    episode_step(model, x, y, &ep, &mut opt, &mut dropout, &mut report)?;
                }
                _ => {
                    let bx = x.select_rows(chunk);
                    let by: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
                    optimizer_step(model, Batch::Supervised { x: &bx, y: &by }, &mut opt, &mut dropout, &mut report)?;
                }
            }
        }
    }
    if attempted > 0 && report.optimizer_steps == 0 {
        return Err(TuningError::AllBatchesSkipped { attempts: attempted });
    }
    if family == ModelFamily::InContext {
        model.set_context(ContextState::new(x.clone(), y.to_vec(), n_classes)?)?;
    }
    Ok(report)
}

fn episode_step(
    model: &mut dyn Model,
    x: &FeatureMatrix,
    y: &[usize],
    ep: &Episode,
    opt: &mut Optimizer,
    dropout: &mut Rng,
    report: &mut FitReport,
) -> Result<(), TuningError> {
    debug_assert_eq!(ep.check(y), Ok(()));
    let sx = x.select_rows(&ep.support);
    let qx = x.select_rows(&ep.query);
    let sy = ep.remap(y, &ep.support);
    let qy = ep.remap(y, &ep.query);
    let batch = Batch::Episode { support_x: &sx, support_y: &sy, query_x: &qx, query_y: &qy, n_classes: ep.n_classes() };
    optimizer_step(model, batch, opt, dropout, report)
}

/// Episodic meta-learning; afterwards the full training set becomes the
/// prediction context.
pub fn train_meta(
    model: &mut dyn Model,
    x: &FeatureMatrix,
    y: &[usize],
    n_classes: usize,
    cfg: &TuningConfig,
) -> Result<FitReport, TuningError> {
    let mut report = FitReport::new(Strategy::Meta);
    if model.family() != ModelFamily::InContext {
        return Err(ModelError::UnsupportedStrategy { model: model.name().into(), strategy: Strategy::Meta.as_str().into() }.into());
    }
    if cfg.epochs > 0 && cfg.n_episodes > 0 && cfg.support_size + cfg.query_size > x.rows {
        return Err(TuningError::InfeasibleEpisode { support: cfg.support_size, query: cfg.query_size, rows: x.rows });
    }
    let mut opt = Optimizer::new(cfg.optimizer_spec(), cfg.n_episodes);
    let mut sampler = rng::stream(cfg.seed, "episodes");
    let mut dropout = rng::stream(cfg.seed, "dropout");
    let budget = SKIP_BUDGET_FACTOR * cfg.n_episodes;
    for _ in 0..cfg.epochs {
        let (mut done, mut attempts) = (0, 0);
        while done < cfg.n_episodes {
            if attempts == budget {
                return Err(TuningError::AllBatchesSkipped { attempts });
            }
            attempts += 1;
            match sample_episode(y, cfg.support_size, cfg.query_size, &mut sampler)? {
                Sampled::Skip => report.skipped += 1,
                Sampled::Episode(ep) => {
                    episode_step(model, x, y, &ep, &mut opt, &mut dropout, &mut report)?;
                    done += 1;
                }
            }
        }
    }
    model.set_context(ContextState::new(x.clone(), y.to_vec(), n_classes)?)?;
    Ok(report)
}

/// Attaches adapters and runs the inner loop with only adapters and the
/// head trainable. Models without eligible layers fall back to full
/// fine-tuning with the same configuration.
pub fn train_peft(
    model: &mut dyn Model,
    x: &FeatureMatrix,
    y: &[usize],
    n_classes: usize,
    cfg: &TuningConfig,
) -> Result<FitReport, TuningError> {
    let peft = models::attach_lora(model, &cfg.peft, rng::derive_seed(cfg.seed, "lora"))?;
    let mut report = match cfg.finetune_mode {
        FinetuneMode::Sft => train_sft(model, x, y, n_classes, cfg)?,
        FinetuneMode::MetaLearning => train_meta(model, x, y, n_classes, cfg)?,
    };
    report.strategy = cfg.registry_strategy().as_str().into();
    report.peft = Some(peft);
    Ok(report)
}
