//! End-to-end pipeline: preprocessing, optional resampling, tuning,
//! prediction, evaluation and persistence behind one object.
//!
//! A pipeline is configured once, fitted once, and is immutable afterwards;
//! prediction and evaluation take `&self` and may run concurrently.

pub mod config;
mod container;

use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{parse_pairs, PipelineConfig, SamplingConfig};
pub use container::{MAGIC, VERSION};

use crate::dataset::{DataError, Dataset, FeatureMatrix, Table};
use crate::metrics::{self, MetricsError, MetricsReport, Prediction};
use crate::models::{build_model, ContextState, LoraConfig, Model, ModelError, MiniIclConfig};
use crate::preprocess::{self, PreprocessError, PreprocessProfile, PreprocessorState};
use crate::resample::{self, ResampleError, ResampleMethod};
use crate::tensor::{ParamStore, Tensor};
use crate::tuning::{self, FitReport, TuningConfig, TuningError};
use container::TensorEntry;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Resample(#[from] ResampleError),
    #[error(transparent)]
    Tuning(#[from] TuningError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown configuration key `{0}`")]
    UnknownConfigKey(String),
    #[error("pipeline is not fitted")]
    NotFitted,
    #[error("not a pipeline file (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    VersionUnsupported(u16),
    #[error("container checksum mismatch")]
    ChecksumMismatch,
    #[error("container file is truncated")]
    TruncatedFile,
    #[error("invalid container header: {0}")]
    Header(String),
    #[error("column `{0}` not found")]
    MissingColumn(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Training,
}

impl PipelineError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            PipelineError::Config(_) | PipelineError::UnknownConfigKey(_) => ErrorCategory::Usage,
            PipelineError::Model(ModelError::UnknownModel(_)) => ErrorCategory::Usage,
            PipelineError::Tuning(TuningError::Model(ModelError::UnknownModel(_))) => ErrorCategory::Usage,
            PipelineError::Tuning(TuningError::UnknownKey(_) | TuningError::InvalidValue { .. }) => ErrorCategory::Usage,
            PipelineError::Model(ModelError::FeatureWidth { .. }) => ErrorCategory::Data,
            PipelineError::Tuning(_) | PipelineError::Model(_) => ErrorCategory::Training,
            _ => ErrorCategory::Data,
        }
    }
}

/// Wall-clock durations of the fit stages. Not persisted.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FitTimings {
    pub preprocess: Duration,
    pub resample: Duration,
    pub tune: Duration,
}

impl FitTimings {
    pub fn total(&self) -> Duration {
        self.preprocess + self.resample + self.tune
    }
}

#[derive(Debug, Clone)]
struct FittedState {
    tuning: TuningConfig,
    preprocessor: PreprocessorState,
    model: Box<dyn Model>,
    minicl: MiniIclConfig,
    n_classes: usize,
    class_names: Vec<String>,
    target_name: String,
    excluded_columns: Vec<String>,
    fit_report: FitReport,
    timings: FitTimings,
}

impl std::fmt::Debug for Box<dyn Model> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("name", &self.name()).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct TabularPipeline {
    config: PipelineConfig,
    state: Option<FittedState>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    name: String,
    n_features: usize,
    n_classes: usize,
    minicl: MiniIclConfig,
    lora: Option<LoraConfig>,
}

#[derive(Serialize, Deserialize)]
struct ContextHeader {
    x: TensorEntry,
    y: Vec<usize>,
    n_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    blob_bytes: usize,
    class_names: Vec<String>,
    config: PipelineConfig,
    context: Option<ContextHeader>,
    excluded_columns: Vec<String>,
    fit_report: FitReport,
    model: ModelHeader,
    preprocessor: PreprocessorState,
    target_name: String,
    tensors: Vec<TensorEntry>,
    tuning: TuningConfig,
}

impl TabularPipeline {
    /// Validates the model name, tuning overrides and capability matrix.
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.resolve_tuning()?;
        Ok(Self { config, state: None })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn is_fitted(&self) -> bool {
        self.state.is_some()
    }

    fn state(&self) -> Result<&FittedState, PipelineError> {
        self.state.as_ref().ok_or(PipelineError::NotFitted)
    }

    pub fn fit(&mut self, train: &Dataset) -> Result<&FitReport, PipelineError> {
        self.fit_excluding(train, &[])
    }

    /// Fits with the named columns removed from the features.
    pub fn fit_excluding(&mut self, train: &Dataset, excluded: &[String]) -> Result<&FitReport, PipelineError> {
        let tuning = self.config.resolve_tuning()?;
        let spec = self.config.spec()?;
        let profile = PreprocessProfile::by_name(spec.profile)?;

        let mut features = train.features().clone();
        for name in excluded {
            if features.column_index(name).is_none() {
                return Err(PipelineError::MissingColumn(name.clone()));
            }
            features = features.drop_column(name)?;
        }

        let started = Instant::now();
        let preprocessor = preprocess::fit(&features, profile)?;
        let x = preprocess::transform(&preprocessor, &features)?;
        let t_pre = started.elapsed();

        let started = Instant::now();
        let (x, y) = match self.config.sampling.method {
            ResampleMethod::None => (x, train.target().to_vec()),
            _ => resample::resample(&x, train.target(), &self.config.resample_spec())?,
        };
        let t_res = started.elapsed();

        let n_classes = train.n_classes();
        let minicl = MiniIclConfig { softmax_temperature: tuning.softmax_temperature, ..MiniIclConfig::default() };
        let started = Instant::now();
        let mut model = build_model(spec.name, x.cols, n_classes, minicl, self.config.seed)?;
        let fit_report = tuning::tune(model.as_mut(), &x, &y, n_classes, &tuning)?;
        let t_tune = started.elapsed();

        self.state = Some(FittedState {
            tuning,
            preprocessor,
            model,
            minicl,
            n_classes,
            class_names: train.class_names().to_vec(),
            target_name: train.target_name().to_string(),
            excluded_columns: excluded.to_vec(),
            fit_report,
            timings: FitTimings { preprocess: t_pre, resample: t_res, tune: t_tune },
        });
        Ok(&self.state.as_ref().expect("just fitted").fit_report)
    }

    pub fn fit_report(&self) -> Result<&FitReport, PipelineError> {
        Ok(&self.state()?.fit_report)
    }

    pub fn timings(&self) -> Result<FitTimings, PipelineError> {
        Ok(self.state()?.timings)
    }

    pub fn tuning(&self) -> Result<&TuningConfig, PipelineError> {
        Ok(&self.state()?.tuning)
    }

    pub fn preprocessor(&self) -> Result<&PreprocessorState, PipelineError> {
        Ok(&self.state()?.preprocessor)
    }

    pub fn model(&self) -> Result<&dyn Model, PipelineError> {
        Ok(self.state()?.model.as_ref())
    }

    pub fn class_names(&self) -> Result<&[String], PipelineError> {
        Ok(&self.state()?.class_names)
    }

    pub fn target_name(&self) -> Result<&str, PipelineError> {
        Ok(&self.state()?.target_name)
    }

    pub fn excluded_columns(&self) -> Result<&[String], PipelineError> {
        Ok(&self.state()?.excluded_columns)
    }

    /// Feature matrix the fitted model sees for `table`. Excluded columns
    /// are dropped when present.
    pub fn transform(&self, table: &Table) -> Result<FeatureMatrix, PipelineError> {
        let state = self.state()?;
        let mut table = table.clone();
        for name in &state.excluded_columns {
            if table.column_index(name).is_some() {
                table = table.drop_column(name)?;
            }
        }
        Ok(preprocess::transform(&state.preprocessor, &table)?)
    }

    pub fn predict_proba(&self, table: &Table) -> Result<Prediction, PipelineError> {
        let x = self.transform(table)?;
        let proba = self.state()?.model.predict_proba(&x)?;
        Ok(Prediction::from_proba(proba)?)
    }

    /// Class indices into [`TabularPipeline::class_names`].
    pub fn predict(&self, table: &Table) -> Result<Vec<usize>, PipelineError> {
        Ok(self.predict_proba(table)?.labels().to_vec())
    }

    fn aligned_prediction(&self, test: &Dataset) -> Result<(Dataset, Prediction), PipelineError> {
        let aligned = test.align_classes(&self.state()?.class_names)?;
        let pred = self.predict_proba(aligned.features())?;
        Ok((aligned, pred))
    }

    /// Accuracy, precision, recall, F1 and ROC AUC.
    pub fn evaluate(&self, test: &Dataset) -> Result<MetricsReport, PipelineError> {
        let (aligned, pred) = self.aligned_prediction(test)?;
        Ok(metrics::evaluate(&pred, aligned.target())?)
    }

    pub fn evaluate_calibration(&self, test: &Dataset, n_bins: usize) -> Result<MetricsReport, PipelineError> {
        let (aligned, pred) = self.aligned_prediction(test)?;
        Ok(metrics::evaluate_calibration(&pred, aligned.target(), n_bins)?)
    }

    /// Groups come from the raw values of `column` in `test`, whether or not
    /// the column was used as a feature.
    pub fn evaluate_fairness(
        &self,
        test: &Dataset,
        column: &str,
        positive_class: usize,
    ) -> Result<MetricsReport, PipelineError> {
        let col = test.features().column_index(column).ok_or_else(|| PipelineError::MissingColumn(column.to_string()))?;
        let groups: Vec<String> = (0..test.n_rows()).map(|r| test.features().raw_value(r, col)).collect();
        let (aligned, pred) = self.aligned_prediction(test)?;
        Ok(metrics::evaluate_fairness(&pred, aligned.target(), &groups, positive_class)?)
    }

    /// Hex SHA-256 of the serialized fitted state.
    pub fn state_fingerprint(&self) -> Result<String, PipelineError> {
        Ok(crate::rng::fingerprint(&self.to_bytes()?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, PipelineError> {
        let state = self.state()?;
        let model = state.model.as_ref();
        let mut blobs = Vec::new();
        let mut tensors = Vec::with_capacity(model.params().len());
        for (name, p) in model.params().iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                offset: blobs.len(),
                trainable: p.trainable,
            });
            container::push_f64s(&mut blobs, p.value.data());
        }
        let context = model.context().map(|ctx| {
            let x = TensorEntry { name: "context.x".into(), shape: vec![ctx.x.rows, ctx.x.cols], offset: blobs.len(), trainable: false };
            container::push_f64s(&mut blobs, &ctx.x.data);
            ContextHeader { x, y: ctx.y.clone(), n_classes: ctx.n_classes }
        });
        let header = Header {
            blob_bytes: blobs.len(),
            class_names: state.class_names.clone(),
            config: self.config.clone(),
            context,
            excluded_columns: state.excluded_columns.clone(),
            fit_report: state.fit_report.clone(),
            model: ModelHeader {
                name: model.name().to_string(),
                n_features: model.n_features(),
                n_classes: state.n_classes,
                minicl: state.minicl,
                lora: model.lora(),
            },
            preprocessor: state.preprocessor.clone(),
            target_name: state.target_name.clone(),
            tensors,
            tuning: state.tuning.clone(),
        };
        let value = serde_json::to_value(&header).map_err(|e| PipelineError::Header(e.to_string()))?;
        container::encode(&value, &blobs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        let (value, blobs) = container::decode(bytes)?;
        let header: Header = serde_json::from_value(value).map_err(|e| PipelineError::Header(e.to_string()))?;
        if header.blob_bytes != blobs.len() {
            return Err(PipelineError::Header(format!(
                "declared {} blob bytes, found {}",
                header.blob_bytes,
                blobs.len()
            )));
        }
        let m = &header.model;
        let mut model = build_model(&m.name, m.n_features, m.n_classes, m.minicl, header.config.seed)?;
        let mut store = ParamStore::new();
        for entry in &header.tensors {
            let value = Tensor::new(entry.shape.clone(), container::read_f64s(blobs, entry)?)
                .map_err(|e| PipelineError::Header(e.to_string()))?;
            store.insert(entry.name.clone(), value, entry.trainable);
        }
        *model.params_mut() = store;
        model.set_lora(m.lora);
        if let Some(ctx) = &header.context {
            let [rows, cols] = ctx.x.shape[..] else {
                return Err(PipelineError::Header("context matrix must be two-dimensional".into()));
            };
            let x = FeatureMatrix::new(rows, cols, container::read_f64s(blobs, &ctx.x)?);
            model.set_context(ContextState::new(x, ctx.y.clone(), ctx.n_classes)?)?;
        }
        Ok(Self {
            config: header.config,
            state: Some(FittedState {
                tuning: header.tuning,
                preprocessor: header.preprocessor,
                model,
                minicl: header.model.minicl,
                n_classes: header.model.n_classes,
                class_names: header.class_names,
                target_name: header.target_name,
                excluded_columns: header.excluded_columns,
                fit_report: header.fit_report,
                timings: FitTimings::default(),
            }),
        })
    }

    /// Writes the fitted state. Optimizer moments are not saved.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
