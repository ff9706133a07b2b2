//! Side-by-side comparison of pipeline configurations on a shared split,
//! plus a multi-dataset suite runner aggregating per-dataset ranks.

mod suite;

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

pub use suite::{parse_configs, DatasetEntry, SuiteCell, SuiteManifest, SuiteResult, SuiteRow};

use crate::dataset::{DataError, Dataset};
use crate::metrics::{MetricsReport, DEFAULT_BINS};
use crate::pipeline::{ErrorCategory, PipelineConfig, PipelineError, TabularPipeline};
use crate::rng;
use crate::tuning::TuningStrategy;

/// Keys a board can be ranked by, in report order.
pub const RANKABLE_KEYS: [&str; 10] = [
    "accuracy",
    "precision",
    "recall",
    "f1_score",
    "roc_auc_score",
    "expected_calibration_error",
    "maximum_calibration_error",
    "brier_score_loss",
    "fit_seconds",
    "predict_seconds",
];

/// Whether lower values of `key` rank better.
pub fn ascending(key: &str) -> bool {
    matches!(
        key,
        "expected_calibration_error" | "maximum_calibration_error" | "brier_score_loss" | "fit_seconds" | "predict_seconds"
    )
}

fn is_timing(key: &str) -> bool {
    matches!(key, "fit_seconds" | "predict_seconds")
}

#[derive(Debug, Error)]
pub enum LeaderboardError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("the leaderboard has no entries")]
    EmptyBoard,
    #[error("`{0}` is not a rankable metric")]
    UnknownMetric(String),
    #[error("the suite manifest lists no datasets")]
    EmptySuite,
    #[error("every run failed")]
    AllRunsFailed,
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid configs file: {0}")]
    Configs(String),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl LeaderboardError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            LeaderboardError::Pipeline(e) => e.category(),
            LeaderboardError::UnknownMetric(_) | LeaderboardError::EmptyBoard | LeaderboardError::Configs(_) => {
                ErrorCategory::Usage
            }
            LeaderboardError::AllRunsFailed | LeaderboardError::ThreadPool(_) => ErrorCategory::Training,
            _ => ErrorCategory::Data,
        }
    }
}

/// Ranks with 1 = best; tied values share the mean of the positions they cover.
pub fn average_ranks(values: &[f64], ascending: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let c = values[a].total_cmp(&values[b]);
        if ascending { c } else { c.reverse() }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i+1 ..= j
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoardEntry {
    pub display_name: String,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderboardEntry {
    pub display_name: String,
    pub config: PipelineConfig,
    pub report: MetricsReport,
    pub fit_seconds: f64,
    pub predict_seconds: f64,
    pub rank: f64,
}

impl LeaderboardEntry {
    pub fn metric(&self, key: &str) -> Option<f64> {
        metric_of(&self.report, self.fit_seconds, self.predict_seconds, key)
    }
}

fn metric_of(report: &MetricsReport, fit: f64, predict: f64, key: &str) -> Option<f64> {
    match key {
        "fit_seconds" => Some(fit),
        "predict_seconds" => Some(predict),
        _ => report.get(key),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EntryIssue {
    Failed(String),
    MetricUnavailable(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcludedEntry {
    pub display_name: String,
    pub issue: EntryIssue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderboardResult {
    pub rank_by: String,
    /// Sorted by rank, then display name.
    pub entries: Vec<LeaderboardEntry>,
    /// Sorted by display name.
    pub excluded: Vec<ExcludedEntry>,
}

impl LeaderboardResult {
    /// Aligned text table; wall times are omitted unless ranked on.
    pub fn to_table(&self) -> String {
        let mut cols: Vec<&str> = RANKABLE_KEYS.iter().copied().filter(|k| !is_timing(k)).collect();
        if is_timing(&self.rank_by) {
            cols.push(&self.rank_by);
        }
        let name_w = self.entries.iter().map(|e| e.display_name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:>5}  {:<name_w$}", "rank", "entry");
        for c in &cols {
            out.push_str(&format!("  {c:>w$}", w = c.len().max(8)));
        }
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!("{:>5}  {:<name_w$}", format_rank(e.rank), e.display_name));
            for c in &cols {
                let v = e.metric(c).map_or("-".to_string(), |v| format!("{v:.4}"));
                out.push_str(&format!("  {v:>w$}", w = c.len().max(8)));
            }
            out.push('\n');
        }
        for x in &self.excluded {
            let why = match &x.issue {
                EntryIssue::Failed(msg) => format!("failed: {msg}"),
                EntryIssue::MetricUnavailable(m) => format!("metric `{m}` unavailable"),
            };
            out.push_str(&format!("    -  {:<name_w$}  {why}\n", x.display_name));
        }
        out
    }
}

pub(crate) fn format_rank(rank: f64) -> String {
    if rank.fract() == 0.0 { format!("{rank:.0}") } else { format!("{rank}") }
}

pub(crate) struct Outcome {
    pub report: MetricsReport,
    pub fit_seconds: f64,
    pub predict_seconds: f64,
}

/// Fits one pipeline and evaluates performance plus calibration.
pub(crate) fn run_one(config: &PipelineConfig, train: &Dataset, test: &Dataset) -> Result<Outcome, PipelineError> {
    let mut pipeline = TabularPipeline::new(config.clone())?;
    let started = Instant::now();
    pipeline.fit(train)?;
    let fit_seconds = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let mut report = pipeline.evaluate(test)?;
    let predict_seconds = started.elapsed().as_secs_f64();
    report.merge(pipeline.evaluate_calibration(test, DEFAULT_BINS)?);
    Ok(Outcome { report, fit_seconds, predict_seconds })
}

/// Configurations compared under one split and one seed.
#[derive(Debug, Clone, Default)]
pub struct TabularLeaderboard {
    entries: Vec<BoardEntry>,
    seed: u64,
    threads: Option<usize>,
}

impl TabularLeaderboard {
    pub fn new(seed: u64) -> Self {
        Self { entries: Vec::new(), seed, threads: None }
    }

    /// Worker count; `None` uses the global pool.
    pub fn with_threads(mut self, threads: Option<usize>) -> Self {
        self.threads = threads;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &[BoardEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add_model(
        &mut self,
        model_name: &str,
        tuning_strategy: TuningStrategy,
        tuning_params: &[(&str, &str)],
    ) -> Result<&BoardEntry, LeaderboardError> {
        let mut config = PipelineConfig::new(model_name, tuning_strategy);
        for (k, v) in tuning_params {
            config = config.with_param(k, v)?;
        }
        self.add_config(config)
    }

    /// Appends under the default display name.
    pub fn add_config(&mut self, config: PipelineConfig) -> Result<&BoardEntry, LeaderboardError> {
        let name = config.display_name();
        self.add_named(&name, config)
    }

    /// Appends; a repeated name gets a `#2`, `#3`, ... suffix. The entry's
    /// seed is derived from the board seed and its display name.
    pub fn add_named(&mut self, name: &str, config: PipelineConfig) -> Result<&BoardEntry, LeaderboardError> {
        TabularPipeline::new(config.clone())?;
        let mut display_name = name.to_string();
        let mut n = 1;
        while self.entries.iter().any(|e| e.display_name == display_name) {
            n += 1;
            display_name = format!("{name}#{n}");
        }
        let config = config.with_seed(rng::derive_seed(self.seed, &display_name));
        self.entries.push(BoardEntry { display_name, config });
        Ok(self.entries.last().expect("just pushed"))
    }

    fn pool(&self) -> Result<Option<rayon::ThreadPool>, LeaderboardError> {
        self.threads
            .map(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build())
            .transpose()
            .map_err(|e| LeaderboardError::ThreadPool(e.to_string()))
    }

    pub(crate) fn execute(
        &self,
        train: &Dataset,
        test: &Dataset,
    ) -> Result<Vec<Result<Outcome, PipelineError>>, LeaderboardError> {
        let work = || self.entries.par_iter().map(|e| run_one(&e.config, train, test)).collect::<Vec<_>>();
        Ok(match self.pool()? {
            Some(pool) => pool.install(work),
            None => work(),
        })
    }

    /// Trains every entry on `train`, evaluates on `test`, and ranks by `rank_by`.
    pub fn run(&self, train: &Dataset, test: &Dataset, rank_by: &str) -> Result<LeaderboardResult, LeaderboardError> {
        if !RANKABLE_KEYS.contains(&rank_by) {
            return Err(LeaderboardError::UnknownMetric(rank_by.to_string()));
        }
        if self.entries.is_empty() {
            return Err(LeaderboardError::EmptyBoard);
        }
        let outcomes = self.execute(train, test)?;
        Ok(rank_outcomes(&self.entries, outcomes, rank_by))
    }
}

pub(crate) fn rank_outcomes(
    entries: &[BoardEntry],
    outcomes: Vec<Result<Outcome, PipelineError>>,
    rank_by: &str,
) -> LeaderboardResult {
    let mut ranked = Vec::new();
    let mut excluded = Vec::new();
    for (entry, outcome) in entries.iter().zip(outcomes) {
        match outcome {
            Err(e) => excluded.push(ExcludedEntry { display_name: entry.display_name.clone(), issue: EntryIssue::Failed(e.to_string()) }),
            Ok(o) => match metric_of(&o.report, o.fit_seconds, o.predict_seconds, rank_by) {
                None => excluded.push(ExcludedEntry {
                    display_name: entry.display_name.clone(),
                    issue: EntryIssue::MetricUnavailable(rank_by.to_string()),
                }),
                Some(_) => ranked.push(LeaderboardEntry {
                    display_name: entry.display_name.clone(),
                    config: entry.config.clone(),
                    report: o.report,
                    fit_seconds: o.fit_seconds,
                    predict_seconds: o.predict_seconds,
                    rank: 0.0,
                }),
            },
        }
    }
    let values: Vec<f64> = ranked.iter().map(|e| e.metric(rank_by).expect("filtered above")).collect();
    for (e, r) in ranked.iter_mut().zip(average_ranks(&values, ascending(rank_by))) {
        e.rank = r;
    }
    ranked.sort_by(|a, b| a.rank.total_cmp(&b.rank).then_with(|| a.display_name.cmp(&b.display_name)));
    excluded.sort_by(|a, b| a.display_name.cmp(&b.display_name));
    LeaderboardResult { rank_by: rank_by.to_string(), entries: ranked, excluded }
}

/// Mean of `values`, or `None` when empty.
pub(crate) fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-key mean rank over datasets where every key has a value.
pub fn mean_ranks_common_subset(table: &[BTreeMap<String, f64>], models: &[String], ascending: bool) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, Vec<f64>> = models.iter().map(|m| (m.clone(), Vec::new())).collect();
    for row in table {
        let Some(values) = models.iter().map(|m| row.get(m).copied()).collect::<Option<Vec<f64>>>() else {
            continue;
        };
        for (m, r) in models.iter().zip(average_ranks(&values, ascending)) {
            sums.get_mut(m).expect("seeded").push(r);
        }
    }
    sums.into_iter().filter_map(|(m, r)| mean(&r).map(|v| (m, v))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_synthetic, train_test_split, SplitSpec};

    #[test]
    fn average_tie_rule() {
        assert_eq!(average_ranks(&[0.9, 0.8, 0.9], false), vec![1.5, 3.0, 1.5]);
        assert_eq!(average_ranks(&[0.1, 0.1, 0.1, 0.2], true), vec![2.0, 2.0, 2.0, 4.0]);
        assert_eq!(average_ranks(&[0.4], false), vec![1.0]);
    }

    #[test]
    fn duplicate_names_are_suffixed() {
        let mut b = TabularLeaderboard::new(0);
        b.add_model("knn", TuningStrategy::Inference, &[]).unwrap();
        b.add_model("knn", TuningStrategy::Inference, &[]).unwrap();
        b.add_model("knn", TuningStrategy::Inference, &[]).unwrap();
        let names: Vec<&str> = b.entries().iter().map(|e| e.display_name.as_str()).collect();
        assert_eq!(names, ["knn-inference", "knn-inference#2", "knn-inference#3"]);
        assert_ne!(b.entries()[0].config.seed, b.entries()[1].config.seed);
    }

    #[test]
    fn registry_errors_surface() {
        let mut b = TabularLeaderboard::new(0);
        let e = b.add_model("nope", TuningStrategy::Inference, &[]).unwrap_err();
        assert!(e.to_string().contains("unknown model"));
        assert!(b.add_model("knn", TuningStrategy::Peft, &[]).is_err());
        assert!(b.is_empty());
    }

    #[test]
    fn run_ranks_and_is_order_independent() {
        let d = make_synthetic(30, 2, 2, 0.6, 1).unwrap();
        let (train, test) = train_test_split(&d, &SplitSpec::default()).unwrap();
        let configs = [
            PipelineConfig::new("knn", TuningStrategy::Inference),
            PipelineConfig::new("logistic", TuningStrategy::Finetune),
            PipelineConfig::new("minicl", TuningStrategy::Inference),
        ];
        let mut fwd = TabularLeaderboard::new(9);
        let mut rev = TabularLeaderboard::new(9).with_threads(Some(1));
        for c in &configs {
            fwd.add_config(c.clone()).unwrap();
        }
        for c in configs.iter().rev() {
            rev.add_config(c.clone()).unwrap();
        }
        let a = fwd.run(&train, &test, "accuracy").unwrap();
        let b = rev.run(&train, &test, "accuracy").unwrap();
        let key = |r: &LeaderboardResult| r.entries.iter().map(|e| (e.display_name.clone(), e.rank, e.report.clone())).collect::<Vec<_>>();
        assert_eq!(key(&a), key(&b));
        let sum: f64 = a.entries.iter().map(|e| e.rank).sum();
        assert_eq!(sum, 6.0);
        assert!(matches!(fwd.run(&train, &test, "bogus"), Err(LeaderboardError::UnknownMetric(_))));
    }

    #[test]
    fn common_subset_mean_ranks() {
        let models = vec!["a".to_string(), "b".to_string()];
        let row = |a: Option<f64>, b: Option<f64>| {
            let mut m = BTreeMap::new();
            if let Some(a) = a {
                m.insert("a".to_string(), a);
            }
            if let Some(b) = b {
                m.insert("b".to_string(), b);
            }
            m
        };
        let table = vec![row(Some(0.9), Some(0.8)), row(Some(0.1), None), row(Some(0.7), Some(0.9))];
        let ranks = mean_ranks_common_subset(&table, &models, false);
        assert_eq!(ranks["a"], 1.5);
        assert_eq!(ranks["b"], 1.5);
    }
}
