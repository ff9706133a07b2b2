//! Multi-dataset benchmark: per-dataset leaderboards aggregated into mean
//! ranks over the datasets on which every configuration succeeded.
//!
//! Manifest format:
//!
//! ```toml
//! seed = 0
//!
//! [[dataset]]
//! name = "blobs"          # optional, defaults to the file stem
//! path = "blobs.csv"      # relative to the manifest
//! target = "y"
//! test_fraction = 0.25    # optional
//! stratified = true       # optional
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{format_rank, mean, mean_ranks_common_subset, rank_outcomes, EntryIssue, LeaderboardError, TabularLeaderboard, RANKABLE_KEYS};
use crate::dataset::{load_csv, train_test_split, SchemaHints, SplitSpec};
use crate::metrics::MetricsReport;
use crate::pipeline::PipelineConfig;
use crate::rng;

const DEFAULT_TEST_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub name: String,
    pub path: PathBuf,
    pub target: String,
    pub test_fraction: f64,
    pub stratified: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteManifest {
    /// Seeds the per-dataset splits.
    pub seed: u64,
    pub datasets: Vec<DatasetEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    name: Option<String>,
    path: PathBuf,
    target: String,
    test_fraction: Option<f64>,
    stratified: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    dataset: Vec<RawDataset>,
}

impl SuiteManifest {
    /// Parses a manifest; relative dataset paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, LeaderboardError> {
        let raw: RawManifest = toml::from_str(text).map_err(|e| LeaderboardError::Manifest(e.to_string()))?;
        if raw.dataset.is_empty() {
            return Err(LeaderboardError::EmptySuite);
        }
        let mut datasets = Vec::with_capacity(raw.dataset.len());
        for d in raw.dataset {
            let name = match d.name {
                Some(n) => n,
                None => d
                    .path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .ok_or_else(|| LeaderboardError::Manifest(format!("cannot name dataset `{}`", d.path.display())))?,
            };
            if datasets.iter().any(|e: &DatasetEntry| e.name == name) {
                return Err(LeaderboardError::Manifest(format!("duplicate dataset name `{name}`")));
            }
            let test_fraction = d.test_fraction.unwrap_or(DEFAULT_TEST_FRACTION);
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                return Err(LeaderboardError::Manifest(format!("`{name}`: test_fraction must lie in (0, 1)")));
            }
            let path = if d.path.is_absolute() { d.path } else { base_dir.join(d.path) };
            datasets.push(DatasetEntry { name, path, target: d.target, test_fraction, stratified: d.stratified.unwrap_or(true) });
        }
        Ok(Self { seed: raw.seed, datasets })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, LeaderboardError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Named configurations, one TOML table per entry:
///
/// ```toml
/// [minicl-meta]
/// model_name = "minicl"
/// tuning_strategy = "finetune"
/// tuning_params.finetune_mode = "meta-learning"
/// ```
pub fn parse_configs(text: &str) -> Result<Vec<(String, PipelineConfig)>, LeaderboardError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| LeaderboardError::Configs(e.to_string()))?;
    if table.is_empty() {
        return Err(LeaderboardError::Configs("no configurations".into()));
    }
    table
        .iter()
        .map(|(name, v)| match v {
            toml::Value::Table(t) => Ok((name.clone(), PipelineConfig::from_table(t)?)),
            _ => Err(LeaderboardError::Configs(format!("`{name}` must be a table"))),
        })
        .collect()
}

/// One (dataset, entry) run.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCell {
    pub dataset: String,
    pub entry: String,
    /// Rank within the dataset's leaderboard; `None` when excluded.
    pub rank: Option<f64>,
    pub report: Option<MetricsReport>,
    pub issue: Option<EntryIssue>,
}

/// Aggregate for one entry over the common subset.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub entry: String,
    pub model: String,
    pub group: String,
    pub mean_rank: Option<f64>,
    pub mean_accuracy: Option<f64>,
    pub mean_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub rank_by: String,
    pub datasets: Vec<String>,
    /// Datasets where every entry produced `rank_by`.
    pub common_datasets: Vec<String>,
    /// Dataset-major, entries sorted by name within a dataset.
    pub cells: Vec<SuiteCell>,
    /// Sorted by group, mean rank, then entry name.
    pub rows: Vec<SuiteRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl SuiteResult {
    /// Builds the aggregate from per-dataset cells.
    pub fn aggregate(
        rank_by: &str,
        datasets: Vec<String>,
        entries: &[(String, PipelineConfig)],
        cells: Vec<SuiteCell>,
    ) -> Result<Self, LeaderboardError> {
        if cells.iter().all(|c| c.report.is_none()) {
            return Err(LeaderboardError::AllRunsFailed);
        }
        let names: Vec<String> = entries.iter().map(|(n, _)| n.clone()).collect();
        let value_of = |c: &SuiteCell, key: &str| c.rank.and(c.report.as_ref()).and_then(|r| r.get(key));
        let table_for = |key: &str| -> Vec<BTreeMap<String, f64>> {
            datasets
                .iter()
                .map(|d| {
                    cells.iter().filter(|c| &c.dataset == d).filter_map(|c| value_of(c, key).map(|v| (c.entry.clone(), v))).collect()
                })
                .collect()
        };
        let rank_table = table_for(rank_by);
        let common: Vec<usize> =
            (0..datasets.len()).filter(|&i| names.iter().all(|n| rank_table[i].contains_key(n))).collect();
        let mean_ranks = mean_ranks_common_subset(&rank_table, &names, super::ascending(rank_by));
        let common_mean = |key: &str, entry: &str| {
            let t = table_for(key);
            let vals: Vec<f64> = common.iter().filter_map(|&i| t[i].get(entry).copied()).collect();
            mean(&vals)
        };
        let mut rows: Vec<SuiteRow> = entries
            .iter()
            .map(|(name, cfg)| SuiteRow {
                entry: name.clone(),
                model: cfg.model_name.clone(),
                group: cfg.strategy_label(),
                mean_rank: mean_ranks.get(name).copied(),
                mean_accuracy: common_mean("accuracy", name),
                mean_f1: common_mean("f1_score", name),
            })
            .collect();
        rows.sort_by(|a, b| {
            a.group
                .cmp(&b.group)
                .then_with(|| a.mean_rank.unwrap_or(f64::INFINITY).total_cmp(&b.mean_rank.unwrap_or(f64::INFINITY)))
                .then_with(|| a.entry.cmp(&b.entry))
        });
        let common_datasets = common.iter().map(|&i| datasets[i].clone()).collect();
        Ok(Self { rank_by: rank_by.to_string(), datasets, common_datasets, cells, rows })
    }

    /// Per-run metrics as CSV. Contains no wall times, so equal inputs give
    /// identical bytes.
    pub fn results_csv(&self) -> String {
        let metric_cols: Vec<&str> = RANKABLE_KEYS.iter().copied().filter(|k| !k.ends_with("_seconds")).collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["dataset", "entry", "status", "rank"];
        header.extend(&metric_cols);
        w.write_record(&header).expect("in-memory write");
        for c in &self.cells {
            let status = match &c.issue {
                None => "ok",
                Some(EntryIssue::Failed(_)) => "failed",
                Some(EntryIssue::MetricUnavailable(_)) => "metric_unavailable",
            };
            let mut rec = vec![c.dataset.clone(), c.entry.clone(), status.to_string(), c.rank.map_or_else(String::new, format_rank)];
            rec.extend(metric_cols.iter().map(|k| fmt_opt(c.report.as_ref().and_then(|r| r.get(k)))));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    /// Grouped summary table, without the timestamp header line.
    pub fn summary_text(&self) -> String {
        let mut out = format!(
            "rank_by: {}\ndatasets: {} (common subset: {})\n\n",
            self.rank_by,
            self.datasets.len(),
            self.common_datasets.len()
        );
        let entry_w = self.rows.iter().map(|r| r.entry.len()).max().unwrap_or(5).max(5);
        let group_w = self.rows.iter().map(|r| r.group.len()).max().unwrap_or(5).max(5);
        out.push_str(&format!(
            "{:<group_w$}  {:<entry_w$}  {:>9}  {:>13}  {:>7}\n",
            "group", "entry", "mean_rank", "mean_accuracy", "mean_f1"
        ));
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<group_w$}  {:<entry_w$}  {:>9}  {:>13}  {:>7}\n",
                r.group,
                r.entry,
                r.mean_rank.map_or("-".to_string(), |v| format!("{v:.2}")),
                f(r.mean_accuracy),
                f(r.mean_f1)
            ));
        }
        let issues: Vec<&SuiteCell> = self.cells.iter().filter(|c| c.issue.is_some()).collect();
        if !issues.is_empty() {
            out.push_str("\nexcluded runs:\n");
            for c in issues {
                let why = match c.issue.as_ref().expect("filtered") {
                    EntryIssue::Failed(m) => format!("failed: {m}"),
                    EntryIssue::MetricUnavailable(m) => format!("metric `{m}` unavailable"),
                };
                out.push_str(&format!("  {} / {}: {why}\n", c.dataset, c.entry));
            }
        }
        out
    }

    /// Writes `results.csv` and `summary.txt` into `dir`. The summary's
    /// first line carries `timestamp`, the only time-dependent output.
    pub fn write_outputs(&self, dir: &Path, timestamp: &str) -> Result<(), LeaderboardError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.csv"), self.results_csv())?;
        std::fs::write(dir.join("summary.txt"), format!("# generated {timestamp}\n{}", self.summary_text()))?;
        Ok(())
    }
}

impl TabularLeaderboard {
    /// Runs every entry on every manifest dataset.
    pub fn run_suite(&self, manifest: &SuiteManifest, rank_by: &str) -> Result<SuiteResult, LeaderboardError> {
        if !RANKABLE_KEYS.contains(&rank_by) {
            return Err(LeaderboardError::UnknownMetric(rank_by.to_string()));
        }
        if self.is_empty() {
            return Err(LeaderboardError::EmptyBoard);
        }
        if manifest.datasets.is_empty() {
            return Err(LeaderboardError::EmptySuite);
        }
        let mut cells = Vec::new();
        for ds in &manifest.datasets {
            let data = load_csv(&ds.path, &ds.target, &SchemaHints::new())?;
            let split = SplitSpec {
                test_fraction: ds.test_fraction,
                stratified: ds.stratified,
                seed: rng::derive_seed(manifest.seed, &ds.name),
            };
            let (train, test) = train_test_split(&data, &split)?;
            let result = rank_outcomes(self.entries(), self.execute(&train, &test)?, rank_by);
            let mut ds_cells: Vec<SuiteCell> = result
                .entries
                .into_iter()
                .map(|e| SuiteCell { dataset: ds.name.clone(), entry: e.display_name, rank: Some(e.rank), report: Some(e.report), issue: None })
                .chain(result.excluded.into_iter().map(|x| SuiteCell {
                    dataset: ds.name.clone(),
                    entry: x.display_name,
                    rank: None,
                    report: None,
                    issue: Some(x.issue),
                }))
                .collect();
            ds_cells.sort_by(|a, b| a.entry.cmp(&b.entry));
            cells.extend(ds_cells);
        }
        let entries: Vec<(String, PipelineConfig)> =
            self.entries().iter().map(|e| (e.display_name.clone(), e.config.clone())).collect();
        SuiteResult::aggregate(rank_by, manifest.datasets.iter().map(|d| d.name.clone()).collect(), &entries, cells)
    }
}
