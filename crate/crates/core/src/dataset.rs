//! Tabular datasets: typed columns, CSV ingestion, deterministic splits and a
//! synthetic cluster generator used by the test-suite and the toy benchmarks.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("target column `{0}` not found in header")]
    MissingTargetColumn(String),
    #[error("row {0} has a different number of fields than the header")]
    RaggedRow(usize),
    #[error("file has no data rows")]
    EmptyFile,
    #[error("target column has a single distinct value; at least two classes are required")]
    SingleClassTarget,
    #[error("row {0} has an empty target value")]
    MissingTarget(usize),
    #[error("column `{column}` is declared numeric but row {row} holds `{value}`")]
    UnparsableNumeric { column: String, row: usize, value: String },
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("class label `{0}` was not present in the training data")]
    UnknownClassLabel(String),
    #[error("column `{0}` not found")]
    UnknownColumn(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    /// Distinct raw values in first-appearance order; empty for numeric columns.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl ColumnSchema {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: ColumnKind::Numeric, categories: Vec::new() }
    }

    pub fn categorical(name: impl Into<String>, categories: Vec<String>) -> Self {
        Self { name: name.into(), kind: ColumnKind::Categorical, categories }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Real(f64),
    Code(usize),
    Missing,
}

/// Feature columns without a target.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    schema: Vec<ColumnSchema>,
    cells: Vec<Cell>,
    n_rows: usize,
}

impl Table {
    pub fn new(schema: Vec<ColumnSchema>, cells: Vec<Cell>) -> Result<Self, DataError> {
        let n_cols = schema.len();
        if n_cols == 0 {
            if !cells.is_empty() {
                return Err(DataError::Invalid("cells present without columns".into()));
            }
            return Ok(Self { schema, cells, n_rows: 0 });
        }
        if !cells.len().is_multiple_of(n_cols) {
            return Err(DataError::Invalid("cell count is not a multiple of the column count".into()));
        }
        for (c, col) in schema.iter().enumerate() {
            if col.kind == ColumnKind::Categorical {
                let mut seen = std::collections::HashSet::new();
                if col.categories.iter().any(|v| !seen.insert(v)) {
                    return Err(DataError::Invalid(format!("duplicate category in `{}`", col.name)));
                }
            }
            for cell in cells.iter().skip(c).step_by(n_cols) {
                match (*cell, col.kind) {
                    (Cell::Missing, _) | (Cell::Real(_), ColumnKind::Numeric) => {}
                    (Cell::Code(k), ColumnKind::Categorical) if k < col.categories.len() => {}
                    _ => {
                        return Err(DataError::Invalid(format!(
                            "cell {cell:?} does not fit column `{}`",
                            col.name
                        )))
                    }
                }
            }
        }
        let n_rows = cells.len() / n_cols;
        Ok(Self { schema, cells, n_rows })
    }

    pub fn schema(&self) -> &[ColumnSchema] {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.schema.len()
    }

    pub fn row(&self, i: usize) -> &[Cell] {
        let w = self.n_cols();
        &self.cells[i * w..(i + 1) * w]
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.n_cols() + col]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|c| c.name == name)
    }

    /// Raw text of a cell as it would appear in a CSV file.
    pub fn raw_value(&self, row: usize, col: usize) -> String {
        match self.cell(row, col) {
            Cell::Real(v) => format!("{v}"),
            Cell::Code(k) => self.schema[col].categories[k].clone(),
            Cell::Missing => String::new(),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Table {
        let mut cells = Vec::with_capacity(rows.len() * self.n_cols());
        for &r in rows {
            cells.extend_from_slice(self.row(r));
        }
        Table { schema: self.schema.clone(), cells, n_rows: rows.len() }
    }

    pub fn drop_column(&self, name: &str) -> Result<Table, DataError> {
        let idx = self.column_index(name).ok_or_else(|| DataError::UnknownColumn(name.into()))?;
        let mut schema = self.schema.clone();
        schema.remove(idx);
        let w = self.n_cols();
        let cells = self
            .cells
            .iter()
            .enumerate()
            .filter(|(i, _)| i % w != idx)
            .map(|(_, c)| *c)
            .collect();
        Ok(Table { schema, cells, n_rows: self.n_rows })
    }

    /// Overwrites one cell. Tables are otherwise immutable; this exists for
    /// building perturbed copies in tests and tools.
    pub fn with_cell(&self, row: usize, col: usize, cell: Cell) -> Result<Table, DataError> {
        let mut cells = self.cells.clone();
        cells[row * self.n_cols() + col] = cell;
        Table::new(self.schema.clone(), cells)
    }
}

/// A table plus an integer-coded class target.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Table,
    target: Vec<usize>,
    class_names: Vec<String>,
    target_name: String,
}

impl Dataset {
    pub fn new(
        features: Table,
        target: Vec<usize>,
        class_names: Vec<String>,
        target_name: impl Into<String>,
    ) -> Result<Self, DataError> {
        if target.len() != features.n_rows() {
            return Err(DataError::Invalid("target length differs from row count".into()));
        }
        if class_names.len() < 2 {
            return Err(DataError::SingleClassTarget);
        }
        if target.iter().any(|&t| t >= class_names.len()) {
            return Err(DataError::Invalid("target index out of range".into()));
        }
        Ok(Self { features, target, class_names, target_name: target_name.into() })
    }

    pub fn features(&self) -> &Table {
        &self.features
    }

    pub fn target(&self) -> &[usize] {
        &self.target
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn target_name(&self) -> &str {
        &self.target_name
    }

    pub fn schema(&self) -> &[ColumnSchema] {
        self.features.schema()
    }

    pub fn n_rows(&self) -> usize {
        self.features.n_rows()
    }

    pub fn n_cols(&self) -> usize {
        self.features.n_cols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &t in &self.target {
            counts[t] += 1;
        }
        counts
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows),
            target: rows.iter().map(|&r| self.target[r]).collect(),
            class_names: self.class_names.clone(),
            target_name: self.target_name.clone(),
        }
    }

    pub fn drop_column(&self, name: &str) -> Result<Dataset, DataError> {
        Ok(Dataset { features: self.features.drop_column(name)?, ..self.clone() })
    }

    pub fn with_features(&self, features: Table) -> Result<Dataset, DataError> {
        Dataset::new(features, self.target.clone(), self.class_names.clone(), self.target_name.clone())
    }

    /// Re-expresses the target in terms of another class list (typically the
    /// training data's), so codes agree across independently loaded files.
    pub fn align_classes(&self, class_names: &[String]) -> Result<Dataset, DataError> {
        let lookup: HashMap<&str, usize> =
            class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let target = self
            .target
            .iter()
            .map(|&t| {
                let name = &self.class_names[t];
                lookup.get(name.as_str()).copied().ok_or_else(|| DataError::UnknownClassLabel(name.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Dataset::new(self.features.clone(), target, class_names.to_vec(), self.target_name.clone())
    }

    /// Writes the dataset as CSV with the target as the last column.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = self.schema().iter().map(|c| c.name.as_str()).collect();
        header.push(&self.target_name);
        w.write_record(&header)?;
        for r in 0..self.n_rows() {
            let mut rec: Vec<String> = (0..self.n_cols()).map(|c| self.features.raw_value(r, c)).collect();
            rec.push(self.class_names[self.target[r]].clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-column kind overrides for [`load_csv`].
pub type SchemaHints = BTreeMap<String, ColumnKind>;

fn parse_real(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn read_records(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() {
        return Err(DataError::EmptyFile);
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(DataError::RaggedRow(i));
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    if rows.is_empty() {
        return Err(DataError::EmptyFile);
    }
    Ok((header, rows))
}

fn build_table(
    names: &[String],
    columns: &[Vec<&str>],
    n_rows: usize,
    hints: &SchemaHints,
) -> Result<Table, DataError> {
    let mut schema = Vec::with_capacity(names.len());
    let mut col_cells: Vec<Vec<Cell>> = Vec::with_capacity(names.len());
    for (name, values) in names.iter().zip(columns) {
        let inferred_numeric = values.iter().all(|v| v.is_empty() || parse_real(v).is_some());
        let kind = hints.get(name).copied().unwrap_or(if inferred_numeric {
            ColumnKind::Numeric
        } else {
            ColumnKind::Categorical
        });
        match kind {
            ColumnKind::Numeric => {
                let mut cells = Vec::with_capacity(n_rows);
                for (row, v) in values.iter().enumerate() {
                    if v.is_empty() {
                        cells.push(Cell::Missing);
                    } else {
                        let x = parse_real(v).ok_or_else(|| DataError::UnparsableNumeric {
                            column: name.clone(),
                            row,
                            value: v.to_string(),
                        })?;
                        cells.push(Cell::Real(x));
                    }
                }
                schema.push(ColumnSchema::numeric(name.clone()));
                col_cells.push(cells);
            }
            ColumnKind::Categorical => {
                let mut categories: Vec<String> = Vec::new();
                let mut index: HashMap<&str, usize> = HashMap::new();
                let mut cells = Vec::with_capacity(n_rows);
                for v in values {
                    if v.is_empty() {
                        cells.push(Cell::Missing);
                        continue;
                    }
                    let code = *index.entry(v).or_insert_with(|| {
                        categories.push(v.to_string());
                        categories.len() - 1
                    });
                    cells.push(Cell::Code(code));
                }
                schema.push(ColumnSchema::categorical(name.clone(), categories));
                col_cells.push(cells);
            }
        }
    }
    let mut cells = Vec::with_capacity(n_rows * names.len());
    for r in 0..n_rows {
        for col in &col_cells {
            cells.push(col[r]);
        }
    }
    Table::new(schema, cells)
}

/// Loads a labelled CSV file. Non-target columns are numeric when every
/// non-empty cell parses as a real number, unless overridden by `hints`.
pub fn load_csv(
    path: impl AsRef<Path>,
    target_column: &str,
    hints: &SchemaHints,
) -> Result<Dataset, DataError> {
    let (header, rows) = read_records(path.as_ref())?;
    let target_idx = header
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| DataError::MissingTargetColumn(target_column.to_string()))?;

    let mut class_names: Vec<String> = Vec::new();
    let mut class_index: HashMap<String, usize> = HashMap::new();
    let mut target = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let raw = &row[target_idx];
        if raw.is_empty() {
            return Err(DataError::MissingTarget(i));
        }
        let code = *class_index.entry(raw.clone()).or_insert_with(|| {
            class_names.push(raw.clone());
            class_names.len() - 1
        });
        target.push(code);
    }
    if class_names.len() < 2 {
        return Err(DataError::SingleClassTarget);
    }

    let names: Vec<String> =
        header.iter().enumerate().filter(|(i, _)| *i != target_idx).map(|(_, h)| h.clone()).collect();
    let columns: Vec<Vec<&str>> = (0..header.len())
        .filter(|&c| c != target_idx)
        .map(|c| rows.iter().map(|r| r[c].as_str()).collect())
        .collect();
    let table = build_table(&names, &columns, rows.len(), hints)?;
    Dataset::new(table, target, class_names, target_column)
}

/// Loads a CSV file as features only. A column named `drop`, when present,
/// is ignored (used to strip a target column before prediction).
pub fn load_table_csv(
    path: impl AsRef<Path>,
    hints: &SchemaHints,
    drop: Option<&str>,
) -> Result<Table, DataError> {
    let (header, rows) = read_records(path.as_ref())?;
    let keep: Vec<usize> = (0..header.len()).filter(|&c| Some(header[c].as_str()) != drop).collect();
    let names: Vec<String> = keep.iter().map(|&c| header[c].clone()).collect();
    let columns: Vec<Vec<&str>> =
        keep.iter().map(|&c| rows.iter().map(|r| r[c].as_str()).collect()).collect();
    build_table(&names, &columns, rows.len(), hints)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { test_fraction: 0.25, stratified: true, seed: 0 }
    }
}

/// Row indices of a train/test partition, each list ascending.
pub fn split_indices(target: &[usize], n_classes: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    let n = target.len();
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(DataError::DegenerateSplit(format!("test_fraction {} outside (0,1)", spec.test_fraction)));
    }
    let n_test = (spec.test_fraction * n as f64).floor() as usize;
    if n_test < 1 || n_test >= n {
        return Err(DataError::DegenerateSplit(format!("{n} rows give {n_test} test rows")));
    }
    let mut rng = rng::stream(spec.seed, "split");
    let mut test = Vec::with_capacity(n_test);
    if spec.stratified {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
        for (i, &t) in target.iter().enumerate() {
            by_class[t].push(i);
        }
        // floor of the proportional share, then the remainder by largest
        // fractional part (lowest class first on ties)
        let shares: Vec<f64> = by_class.iter().map(|c| c.len() as f64 * spec.test_fraction).collect();
        let mut alloc: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
        let mut remaining = n_test.saturating_sub(alloc.iter().sum());
        let mut order: Vec<usize> = (0..n_classes).collect();
        order.sort_by(|&a, &b| {
            let fa = shares[a] - shares[a].floor();
            let fb = shares[b] - shares[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &c in &order {
            if remaining == 0 {
                break;
            }
            if shares[c] > shares[c].floor() && alloc[c] < by_class[c].len() {
                alloc[c] += 1;
                remaining -= 1;
            }
        }
        for (c, members) in by_class.iter_mut().enumerate() {
            if members.is_empty() {
                continue;
            }
            if alloc[c] >= members.len() {
                return Err(DataError::DegenerateSplit(format!("class {c} would be absent from train")));
            }
            members.shuffle(&mut rng);
            test.extend_from_slice(&members[..alloc[c]]);
        }
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        test.extend_from_slice(&all[..n_test]);
    }
    test.sort_unstable();
    let mut is_test = vec![false; n];
    for &i in &test {
        is_test[i] = true;
    }
    let train: Vec<usize> = (0..n).filter(|&i| !is_test[i]).collect();
    if train.is_empty() || test.is_empty() {
        return Err(DataError::DegenerateSplit("empty side".into()));
    }
    Ok((train, test))
}

pub fn train_test_split(d: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset), DataError> {
    let (train, test) = split_indices(d.target(), d.n_classes(), spec)?;
    Ok((d.select_rows(&train), d.select_rows(&test)))
}

/// Class means sit on a regular simplex of radius `4 * cluster_spread` when
/// there are enough feature dimensions, otherwise on a regular polygon in the
/// first two dimensions (or evenly along a line for a single feature).
fn cluster_means(n_classes: usize, n_features: usize, radius: f64) -> Vec<Vec<f64>> {
    let mut means = vec![vec![0.0; n_features]; n_classes];
    if n_classes <= n_features {
        let inv_k = 1.0 / n_classes as f64;
        let norm = ((1.0 - inv_k).powi(2) + (n_classes as f64 - 1.0) * inv_k * inv_k).sqrt();
        for (k, m) in means.iter_mut().enumerate() {
            for (j, v) in m.iter_mut().take(n_classes).enumerate() {
                let e = if j == k { 1.0 } else { 0.0 };
                *v = radius * (e - inv_k) / norm;
            }
        }
    } else if n_features >= 2 {
        for (k, m) in means.iter_mut().enumerate() {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / n_classes as f64;
            m[0] = radius * angle.cos();
            m[1] = radius * angle.sin();
        }
    } else {
        for (k, m) in means.iter_mut().enumerate() {
            m[0] = -radius + 2.0 * radius * k as f64 / (n_classes as f64 - 1.0);
        }
    }
    means
}

/// Gaussian clusters, one per class, fully numeric and deterministic in `seed`.
pub fn make_synthetic(
    n_per_class: usize,
    n_classes: usize,
    n_features: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if n_per_class == 0 || n_features == 0 || n_classes < 2 || !(cluster_spread > 0.0) {
        return Err(DataError::Invalid("make_synthetic needs positive counts, >=2 classes and spread > 0".into()));
    }
    let means = cluster_means(n_classes, n_features, 4.0 * cluster_spread);
    let noise = Normal::new(0.0, cluster_spread).expect("spread is positive");
    let mut rng = rng::stream(seed, "synthetic");
    let mut cells = Vec::with_capacity(n_per_class * n_classes * n_features);
    let mut target = Vec::with_capacity(n_per_class * n_classes);
    for _ in 0..n_per_class {
        for (k, mean) in means.iter().enumerate() {
            for &m in mean {
                cells.push(Cell::Real(m + noise.sample(&mut rng)));
            }
            target.push(k);
        }
    }
    let schema = (0..n_features).map(|j| ColumnSchema::numeric(format!("x{j}"))).collect();
    let table = Table::new(schema, cells)?;
    let class_names = (0..n_classes).map(|k| k.to_string()).collect();
    Dataset::new(table, target, class_names, "y")
}

/// Dense row-major real matrix produced by preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix::new(idx.len(), self.cols, data)
    }

    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(16 + self.data.len() * 8);
        bytes.extend_from_slice(&(self.rows as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        rng::fingerprint(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn infers_numeric_and_categorical_columns() {
        let f = write_tmp("a,b,y\n1.5,red,yes\n,blue,no\n2,red,yes\n");
        let d = load_csv(f.path(), "y", &SchemaHints::new()).unwrap();
        assert_eq!(d.schema()[0].kind, ColumnKind::Numeric);
        assert_eq!(d.schema()[1].kind, ColumnKind::Categorical);
        assert_eq!(d.schema()[1].categories, vec!["red", "blue"]);
        assert_eq!(d.features().cell(1, 0), Cell::Missing);
        assert_eq!(d.n_classes(), 2);
        assert_eq!(d.target(), &[0, 1, 0]);
        assert_eq!(d.class_names(), &["yes", "no"]);
    }

    #[test]
    fn hints_override_inference() {
        let f = write_tmp("a,y\n1,0\n2,1\n3,1\n");
        let mut hints = SchemaHints::new();
        hints.insert("a".into(), ColumnKind::Categorical);
        let d = load_csv(f.path(), "y", &hints).unwrap();
        assert_eq!(d.schema()[0].kind, ColumnKind::Categorical);
        assert_eq!(d.schema()[0].categories, vec!["1", "2", "3"]);
    }

    #[test]
    fn load_errors() {
        let f = write_tmp("a,y\n1,0\n2,0\n");
        assert!(matches!(load_csv(f.path(), "y", &SchemaHints::new()), Err(DataError::SingleClassTarget)));
        assert!(matches!(load_csv(f.path(), "z", &SchemaHints::new()), Err(DataError::MissingTargetColumn(_))));
        let f = write_tmp("a,y\n1,0\n2\n");
        assert!(matches!(load_csv(f.path(), "y", &SchemaHints::new()), Err(DataError::RaggedRow(1))));
        let f = write_tmp("a,y\n");
        assert!(matches!(load_csv(f.path(), "y", &SchemaHints::new()), Err(DataError::EmptyFile)));
        let f = write_tmp("a,y\n1,0\n2,\n");
        assert!(matches!(load_csv(f.path(), "y", &SchemaHints::new()), Err(DataError::MissingTarget(1))));
    }

    #[test]
    fn rfc4180_quoting() {
        let f = write_tmp("name,y\n\"a, b\",0\n\"say \"\"hi\"\"\",1\n");
        let d = load_csv(f.path(), "y", &SchemaHints::new()).unwrap();
        assert_eq!(d.schema()[0].categories, vec!["a, b", "say \"hi\""]);
    }

    #[test]
    fn reload_is_identical_and_write_roundtrips() {
        let d = make_synthetic(5, 3, 2, 0.5, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        d.write_csv(&p).unwrap();
        let a = load_csv(&p, "y", &SchemaHints::new()).unwrap();
        let b = load_csv(&p, "y", &SchemaHints::new()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.target(), d.target());
        assert_eq!(a.features(), d.features());
    }

    #[test]
    fn split_basic_partition() {
        let d = make_synthetic(5, 2, 1, 1.0, 0).unwrap();
        let spec = SplitSpec { test_fraction: 0.2, stratified: false, seed: 1 };
        let (tr, te) = split_indices(d.target(), 2, &spec).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(d.target(), 2, &spec).unwrap(), (tr, te));
    }

    #[test]
    fn stratified_six_four_half() {
        let target = vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1];
        let spec = SplitSpec { test_fraction: 0.5, stratified: true, seed: 9 };
        let (_, te) = split_indices(&target, 2, &spec).unwrap();
        let ones = te.iter().filter(|&&i| target[i] == 1).count();
        assert_eq!((te.len() - ones, ones), (3, 2));
    }

    #[test]
    fn degenerate_splits() {
        let target = vec![0, 1, 0];
        let spec = SplitSpec { test_fraction: 0.2, stratified: false, seed: 0 };
        assert!(matches!(split_indices(&target, 2, &spec), Err(DataError::DegenerateSplit(_))));
        let target = vec![0, 0, 0, 0, 1];
        let spec = SplitSpec { test_fraction: 0.9, stratified: true, seed: 0 };
        assert!(matches!(split_indices(&target, 2, &spec), Err(DataError::DegenerateSplit(_))));
    }

    #[test]
    fn synthetic_shape_and_degenerate_spread() {
        let d = make_synthetic(50, 2, 2, 0.5, 7).unwrap();
        assert_eq!(d.n_rows(), 100);
        assert_eq!(d.n_cols(), 2);
        assert_eq!(d.class_counts(), vec![50, 50]);
        let tight = make_synthetic(20, 3, 2, 1e-9, 7).unwrap();
        for k in 0..3 {
            let rows: Vec<usize> = (0..60).filter(|&r| tight.target()[r] == k).collect();
            let first = tight.features().row(rows[0]).to_vec();
            for &r in &rows {
                for (c, cell) in tight.features().row(r).iter().enumerate() {
                    let Cell::Real(v) = cell else { panic!() };
                    let Cell::Real(f) = first[c] else { panic!() };
                    assert!((v - f).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn align_classes_maps_by_name() {
        let d = make_synthetic(2, 2, 1, 1.0, 0).unwrap();
        let flipped = d.align_classes(&["1".to_string(), "0".to_string()]).unwrap();
        for (a, b) in d.target().iter().zip(flipped.target()) {
            assert_eq!(*a, 1 - *b);
        }
        assert!(d.align_classes(&["0".to_string(), "2".to_string()]).is_err());
    }
}
