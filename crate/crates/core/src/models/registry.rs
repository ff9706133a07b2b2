//! Model catalog: capability matrix, default hyperparameters, preprocessing
//! profile, and constructors for the models that run here.
//!
//! Defaults are stored as `key=value` pairs keyed by strategy. For runnable
//! models the tuning layer parses these same pairs, so the printed defaults
//! and the applied defaults cannot drift apart. Entries marked not runnable
//! document the large pretrained models whose weights are not bundled.

use serde::Serialize;

use super::{Knn, Logistic, MiniIcl, MiniIclConfig, Model, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Support {
    Full,
    /// Accepted, but may revert to full fine-tuning.
    Experimental,
    Unsupported,
}

impl Support {
    pub fn symbol(self) -> &'static str {
        match self {
            Support::Full => "yes",
            Support::Experimental => "experimental",
            Support::Unsupported => "-",
        }
    }

    pub fn allowed(self) -> bool {
        self != Support::Unsupported
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Capabilities {
    pub inference: Support,
    pub sft: Support,
    pub meta: Support,
    pub peft_sft: Support,
    pub peft_meta: Support,
}

/// A concrete (strategy, inner loop) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Strategy {
    Inference,
    Sft,
    Meta,
    PeftSft,
    PeftMeta,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Inference, Strategy::Sft, Strategy::Meta, Strategy::PeftSft, Strategy::PeftMeta];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Inference => "inference",
            Strategy::Sft => "finetune-sft",
            Strategy::Meta => "finetune-meta",
            Strategy::PeftSft => "peft-sft",
            Strategy::PeftMeta => "peft-meta",
        }
    }
}

impl Capabilities {
    pub fn get(&self, s: Strategy) -> Support {
        match s {
            Strategy::Inference => self.inference,
            Strategy::Sft => self.sft,
            Strategy::Meta => self.meta,
            Strategy::PeftSft => self.peft_sft,
            Strategy::PeftMeta => self.peft_meta,
        }
    }
}

pub type Defaults = &'static [(&'static str, &'static [(&'static str, &'static str)])];

#[derive(Debug, Clone, Serialize)]
pub struct ModelSpec {
    pub name: &'static str,
    pub summary: &'static str,
    pub profile: &'static str,
    pub runnable: bool,
    pub capabilities: Capabilities,
    /// Sections: "inference", "sft", "meta", "peft".
    pub defaults: Defaults,
    pub architecture: &'static [(&'static str, &'static str)],
}

impl ModelSpec {
    pub fn defaults_for(&self, section: &str) -> Option<&'static [(&'static str, &'static str)]> {
        self.defaults.iter().find(|(s, _)| *s == section).map(|(_, kv)| *kv)
    }

    pub fn support(&self, s: Strategy) -> Support {
        self.capabilities.get(s)
    }

    /// Errors unless `s` is allowed for this model.
    pub fn check(&self, s: Strategy) -> Result<Support, ModelError> {
        if !self.runnable {
            return Err(ModelError::NotRunnable(self.name.to_string()));
        }
        let support = self.support(s);
        if !support.allowed() {
            return Err(ModelError::UnsupportedStrategy { model: self.name.to_string(), strategy: s.as_str().to_string() });
        }
        Ok(support)
    }
}

use Support::{Experimental as X, Full as F, Unsupported as U};

const ALL_FULL: Capabilities = Capabilities { inference: F, sft: F, meta: F, peft_sft: F, peft_meta: F };

const LORA_DEFAULTS: &[(&str, &str)] =
    &[("peft_config.r", "8"), ("peft_config.lora_alpha", "16"), ("peft_config.lora_dropout", "0.05")];

const ORION_INFERENCE: &[(&str, &str)] = &[
    ("min_batch_size", "1"),
    ("safety_factor", "0.8"),
    ("offload", "auto (COL), False (ROW/ICL)"),
    ("use_amp", "True"),
];

const ICL_SFT: &[(&str, &str)] =
    &[("epochs", "5"), ("learning_rate", "1e-5"), ("batch_size", "16"), ("optimizer", "adam")];

const ICL_META: &[(&str, &str)] = &[
    ("epochs", "5"),
    ("learning_rate", "2e-6"),
    ("support_size", "48"),
    ("query_size", "32"),
    ("n_episodes", "1000"),
    ("optimizer", "adam"),
];

pub static CATALOG: &[ModelSpec] = &[
    ModelSpec {
        name: "minicl",
        summary: "small split-masked row transformer (d_model 32, 2 heads, 2 layers)",
        profile: "icl-numeric",
        runnable: true,
        capabilities: ALL_FULL,
        defaults: &[
            ("inference", &[("softmax_temperature", "0.9")]),
            // learning rates are the reference values scaled x100 for a
            // randomly initialized model at desk scale
            ("sft", &[("epochs", "5"), ("learning_rate", "1e-3"), ("batch_size", "16"), ("optimizer", "adam")]),
            (
                "meta",
                &[
                    ("epochs", "5"),
                    ("learning_rate", "2e-4"),
                    ("support_size", "48"),
                    ("query_size", "32"),
                    ("n_episodes", "1000"),
                    ("optimizer", "adam"),
                ],
            ),
            ("peft", LORA_DEFAULTS),
        ],
        architecture: &[
            ("d_model", "32"),
            ("n_heads", "2"),
            ("n_layers", "2"),
            ("k_max", "10"),
            ("mlp_hidden", "64"),
        ],
    },
    ModelSpec {
        name: "logistic",
        summary: "multinomial logistic regression baseline",
        profile: "linear-onehot",
        runnable: true,
        capabilities: Capabilities { inference: U, sft: F, meta: U, peft_sft: X, peft_meta: U },
        defaults: &[
            (
                "sft",
                &[
                    ("epochs", "500"),
                    ("learning_rate", "0.05"),
                    ("batch_size", "full"),
                    ("weight_decay", "1e-4"),
                    ("optimizer", "adamw"),
                ],
            ),
            ("peft", LORA_DEFAULTS),
        ],
        architecture: &[],
    },
    ModelSpec {
        name: "knn",
        summary: "k-nearest-neighbor baseline (memorizes the training rows)",
        profile: "linear-onehot",
        runnable: true,
        capabilities: Capabilities { inference: F, sft: F, meta: U, peft_sft: U, peft_meta: U },
        defaults: &[("inference", &[]), ("sft", &[])],
        architecture: &[("k", "5")],
    },
    ModelSpec {
        name: "TabPFN",
        summary: "prior-fitted network approximating Bayesian inference on synthetic priors",
        profile: "icl-numeric",
        runnable: false,
        capabilities: Capabilities { inference: F, sft: F, meta: F, peft_sft: X, peft_meta: X },
        defaults: &[
            (
                "inference",
                &[("n_estimators", "8"), ("softmax_temperature", "0.9"), ("average_before_softmax", "False")],
            ),
            (
                "sft",
                &[
                    ("epochs", "25"),
                    ("learning_rate", "1e-5"),
                    ("max_episode_size", "len(X)"),
                    ("query_set_ratio", "0.3"),
                    ("weight_decay", "1e-4"),
                    ("optimizer", "adamw"),
                ],
            ),
            ("meta", &[("epochs", "3"), ("learning_rate", "1e-5"), ("batch_size", "256"), ("optimizer", "adamw")]),
            ("peft", LORA_DEFAULTS),
        ],
        architecture: &[],
    },
    ModelSpec {
        name: "TabICL",
        summary: "two-stage column-then-row attention for large-scale tabular ICL",
        profile: "icl-numeric",
        runnable: false,
        capabilities: ALL_FULL,
        defaults: &[("inference", ORION_INFERENCE), ("sft", ICL_SFT), ("meta", ICL_META), ("peft", LORA_DEFAULTS)],
        architecture: &[],
    },
    ModelSpec {
        name: "OrionMSP",
        summary: "multi-scale sparse attention with latent memory",
        profile: "icl-numeric",
        runnable: false,
        capabilities: ALL_FULL,
        defaults: &[("inference", ORION_INFERENCE), ("sft", ICL_SFT), ("meta", ICL_META), ("peft", LORA_DEFAULTS)],
        architecture: &[],
    },
    ModelSpec {
        name: "OrionBiX",
        summary: "biaxial attention with bidirectional context modeling",
        profile: "icl-numeric",
        runnable: false,
        capabilities: ALL_FULL,
        defaults: &[("inference", ORION_INFERENCE), ("sft", ICL_SFT), ("meta", ICL_META), ("peft", LORA_DEFAULTS)],
        architecture: &[],
    },
    ModelSpec {
        name: "TabDPT",
        summary: "ICL model with denoising self-supervised pretraining",
        profile: "icl-numeric",
        runnable: false,
        capabilities: ALL_FULL,
        defaults: &[
            (
                "inference",
                &[("n_ensembles", "8"), ("temperature", "0.8"), ("context_size", "512"), ("permute_classes", "True")],
            ),
            (
                "sft",
                &[
                    ("epochs", "5"),
                    ("learning_rate", "2e-5"),
                    ("batch_size", "32"),
                    ("weight_decay", "1e-4"),
                    ("warmup_epochs", "1"),
                    ("optimizer", "adam"),
                ],
            ),
            (
                "meta",
                &[
                    ("epochs", "5"),
                    ("learning_rate", "1e-5"),
                    ("batch_size", "8"),
                    ("support_size", "512"),
                    ("query_size", "256"),
                    ("steps_per_epoch", "100"),
                    ("optimizer", "adam"),
                ],
            ),
            ("peft", LORA_DEFAULTS),
        ],
        architecture: &[],
    },
    ModelSpec {
        name: "Mitra",
        summary: "row and column attention with mixed synthetic priors",
        profile: "icl-numeric",
        runnable: false,
        capabilities: ALL_FULL,
        defaults: &[
            (
                "inference",
                &[("d_model", "64"), ("num_heads", "4"), ("num_layers", "2"), ("use_synthetic_prior", "True")],
            ),
            (
                "sft",
                &[
                    ("epochs", "5"),
                    ("learning_rate", "1e-5"),
                    ("batch_size", "128"),
                    ("weight_decay", "1e-4"),
                    ("warmup_epochs", "1"),
                    ("optimizer", "adam"),
                ],
            ),
            (
                "meta",
                &[
                    ("epochs", "3"),
                    ("learning_rate", "1e-5"),
                    ("batch_size", "4"),
                    ("support_size", "128"),
                    ("query_size", "128"),
                    ("steps_per_epoch", "50"),
                    ("optimizer", "adam"),
                ],
            ),
            ("peft", LORA_DEFAULTS),
        ],
        architecture: &[],
    },
    ModelSpec {
        name: "ContextTab",
        summary: "ICL with modality-specific semantic embeddings",
        profile: "icl-numeric",
        runnable: false,
        capabilities: Capabilities { inference: F, sft: F, meta: U, peft_sft: X, peft_meta: U },
        defaults: &[
            ("inference", &[]),
            ("sft", &[("epochs", "5"), ("learning_rate", "1e-4"), ("batch_size", "128"), ("optimizer", "adam")]),
            ("peft", LORA_DEFAULTS),
        ],
        architecture: &[],
    },
];

/// Case-insensitive lookup.
pub fn lookup(name: &str) -> Result<&'static ModelSpec, ModelError> {
    CATALOG
        .iter()
        .find(|s| s.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| ModelError::UnknownModel(name.to_string()))
}

pub const KNN_K: usize = 5;

/// Builds a fresh runnable model.
pub fn build_model(
    name: &str,
    n_features: usize,
    n_classes: usize,
    minicl: MiniIclConfig,
    seed: u64,
) -> Result<Box<dyn Model>, ModelError> {
    let spec = lookup(name)?;
    match spec.name {
        "minicl" => {
            if n_classes > minicl.k_max {
                return Err(ModelError::TooManyClasses { k: n_classes, k_max: minicl.k_max });
            }
            Ok(Box::new(MiniIcl::new(minicl, n_features, seed)))
        }
        "logistic" => Ok(Box::new(Logistic::new(n_features, n_classes))),
        "knn" => Ok(Box::new(Knn::new(KNN_K, n_features))),
        _ => Err(ModelError::NotRunnable(spec.name.to_string())),
    }
}
