//! Model-aware preprocessing: imputation, scaling and categorical encoding
//! fitted on training rows only and then applied unchanged to any split.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Cell, ColumnKind, ColumnSchema, FeatureMatrix, Table};
use crate::rng;

/// Placeholder category used when a categorical column has no observed value.
pub const MISSING_CATEGORY: &str = "<missing>";

const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("cannot fit preprocessing on an empty training set")]
    EmptyTrainingSet,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("unknown preprocessing profile `{0}`")]
    UnknownProfile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NumericScaling {
    Standardize,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CategoricalEncoding {
    IntegerCodes,
    OneHot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NumericImpute {
    Mean,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CategoricalImpute {
    Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessProfile {
    pub numeric_scaling: NumericScaling,
    pub categorical_encoding: CategoricalEncoding,
    pub impute_numeric: NumericImpute,
    pub impute_categorical: CategoricalImpute,
}

impl PreprocessProfile {
    /// Standardized numerics with integer category codes; used by in-context models.
    pub const ICL_NUMERIC: PreprocessProfile = PreprocessProfile {
        numeric_scaling: NumericScaling::Standardize,
        categorical_encoding: CategoricalEncoding::IntegerCodes,
        impute_numeric: NumericImpute::Mean,
        impute_categorical: CategoricalImpute::Mode,
    };

    /// Standardized numerics with one-hot categories; used by linear baselines.
    pub const LINEAR_ONEHOT: PreprocessProfile = PreprocessProfile {
        numeric_scaling: NumericScaling::Standardize,
        categorical_encoding: CategoricalEncoding::OneHot,
        impute_numeric: NumericImpute::Mean,
        impute_categorical: CategoricalImpute::Mode,
    };

    pub fn by_name(name: &str) -> Result<Self, PreprocessError> {
        match name {
            "icl-numeric" => Ok(Self::ICL_NUMERIC),
            "linear-onehot" => Ok(Self::LINEAR_ONEHOT),
            other => Err(PreprocessError::UnknownProfile(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnTransform {
    Numeric { impute_value: f64, mean: f64, std: f64 },
    Categorical { mode_code: usize, codebook: Vec<String>, unseen_code: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedColumn {
    pub name: String,
    pub kind: ColumnKind,
    pub transform: ColumnTransform,
}

/// Train-fitted transforms; immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessorState {
    pub profile: PreprocessProfile,
    pub columns: Vec<FittedColumn>,
    pub fitted_on_rows: usize,
}

fn numeric_stats(values: &[f64], impute: NumericImpute) -> (f64, f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0, STD_FLOOR);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let impute_value = match impute {
        NumericImpute::Mean => mean,
        NumericImpute::Median => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            let m = sorted.len() / 2;
            if sorted.len() % 2 == 1 {
                sorted[m]
            } else {
                0.5 * (sorted[m - 1] + sorted[m])
            }
        }
    };
    (impute_value, mean, var.sqrt().max(STD_FLOOR))
}

pub fn fit(train: &Table, profile: PreprocessProfile) -> Result<PreprocessorState, PreprocessError> {
    if train.n_rows() == 0 {
        return Err(PreprocessError::EmptyTrainingSet);
    }
    let mut columns = Vec::with_capacity(train.n_cols());
    for (c, col) in train.schema().iter().enumerate() {
        let transform = match col.kind {
            ColumnKind::Numeric => {
                let observed: Vec<f64> = (0..train.n_rows())
                    .filter_map(|r| match train.cell(r, c) {
                        Cell::Real(v) => Some(v),
                        _ => None,
                    })
                    .collect();
                let (impute_value, mean, std) = numeric_stats(&observed, profile.impute_numeric);
                ColumnTransform::Numeric { impute_value, mean, std }
            }
            ColumnKind::Categorical => {
                // codebook holds only values seen in these rows, in first-appearance order
                let mut codebook: Vec<String> = Vec::new();
                let mut counts: Vec<usize> = Vec::new();
                for r in 0..train.n_rows() {
                    if let Cell::Code(k) = train.cell(r, c) {
                        let raw = &col.categories[k];
                        match codebook.iter().position(|v| v == raw) {
                            Some(i) => counts[i] += 1,
                            None => {
                                codebook.push(raw.clone());
                                counts.push(1);
                            }
                        }
                    }
                }
                if codebook.is_empty() {
                    codebook.push(MISSING_CATEGORY.to_string());
                    counts.push(0);
                }
                let mut mode_code = 0;
                for (i, &n) in counts.iter().enumerate() {
                    if n > counts[mode_code] {
                        mode_code = i;
                    }
                }
                let unseen_code = codebook.len();
                ColumnTransform::Categorical { mode_code, codebook, unseen_code }
            }
        };
        columns.push(FittedColumn { name: col.name.clone(), kind: col.kind, transform });
    }
    Ok(PreprocessorState { profile, columns, fitted_on_rows: train.n_rows() })
}

impl PreprocessorState {
    /// Width of the matrix produced by [`transform`].
    pub fn output_width(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match (&c.transform, self.profile.categorical_encoding) {
                (ColumnTransform::Numeric { .. }, _) => 1,
                (ColumnTransform::Categorical { .. }, CategoricalEncoding::IntegerCodes) => 1,
                (ColumnTransform::Categorical { codebook, .. }, CategoricalEncoding::OneHot) => codebook.len() + 1,
            })
            .sum()
    }

    /// Schema the state expects, for loading later files consistently.
    pub fn column_kinds(&self) -> Vec<(String, ColumnKind)> {
        self.columns.iter().map(|c| (c.name.clone(), c.kind)).collect()
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("state serializes");
        rng::fingerprint(&json)
    }
}

fn check_schema(state: &PreprocessorState, schema: &[ColumnSchema]) -> Result<(), PreprocessError> {
    if schema.len() != state.columns.len() {
        return Err(PreprocessError::SchemaMismatch(format!(
            "expected {} columns, got {}",
            state.columns.len(),
            schema.len()
        )));
    }
    for (fitted, col) in state.columns.iter().zip(schema) {
        if fitted.name != col.name || fitted.kind != col.kind {
            return Err(PreprocessError::SchemaMismatch(format!(
                "expected column `{}` ({:?}), got `{}` ({:?})",
                fitted.name, fitted.kind, col.name, col.kind
            )));
        }
    }
    Ok(())
}

/// Applies a fitted state. Pure: the same inputs always give the same bits.
pub fn transform(state: &PreprocessorState, table: &Table) -> Result<FeatureMatrix, PreprocessError> {
    check_schema(state, table.schema())?;
    let width = state.output_width();
    let one_hot = state.profile.categorical_encoding == CategoricalEncoding::OneHot;
    let standardize = state.profile.numeric_scaling == NumericScaling::Standardize;

    // raw category index in this table -> code in the fitted codebook
    let remaps: Vec<Option<Vec<usize>>> = state
        .columns
        .iter()
        .zip(table.schema())
        .map(|(fitted, col)| match &fitted.transform {
            ColumnTransform::Categorical { codebook, unseen_code, .. } => Some(
                col.categories
                    .iter()
                    .map(|raw| codebook.iter().position(|v| v == raw).unwrap_or(*unseen_code))
                    .collect(),
            ),
            ColumnTransform::Numeric { .. } => None,
        })
        .collect();

    let mut data = Vec::with_capacity(table.n_rows() * width);
    for r in 0..table.n_rows() {
        for (c, fitted) in state.columns.iter().enumerate() {
            match &fitted.transform {
                ColumnTransform::Numeric { impute_value, mean, std } => {
                    let x = match table.cell(r, c) {
                        Cell::Real(v) => v,
                        _ => *impute_value,
                    };
                    data.push(if standardize { (x - mean) / std } else { x });
                }
                ColumnTransform::Categorical { mode_code, codebook, .. } => {
                    let code = match table.cell(r, c) {
                        Cell::Code(k) => remaps[c].as_ref().expect("categorical remap")[k],
                        _ => *mode_code,
                    };
                    if one_hot {
                        let start = data.len();
                        data.resize(start + codebook.len() + 1, 0.0);
                        data[start + code] = 1.0;
                    } else {
                        data.push(code as f64);
                    }
                }
            }
        }
    }
    Ok(FeatureMatrix::new(table.n_rows(), width, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(schema: Vec<ColumnSchema>, cells: Vec<Cell>) -> Table {
        Table::new(schema, cells).unwrap()
    }

    #[test]
    fn numeric_mean_impute_ignores_missing() {
        let t = table(vec![ColumnSchema::numeric("a")], vec![Cell::Real(1.0), Cell::Real(3.0), Cell::Missing]);
        let s = fit(&t, PreprocessProfile::ICL_NUMERIC).unwrap();
        let ColumnTransform::Numeric { impute_value, mean, std } = s.columns[0].transform else { panic!() };
        assert_eq!(impute_value, 2.0);
        assert_eq!(mean, 2.0);
        assert_eq!(std, 1.0);
        let m = transform(&s, &t).unwrap();
        assert_eq!(m.data, vec![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn median_impute() {
        let t = table(
            vec![ColumnSchema::numeric("a")],
            vec![Cell::Real(1.0), Cell::Real(10.0), Cell::Real(2.0), Cell::Missing],
        );
        let profile = PreprocessProfile { impute_numeric: NumericImpute::Median, ..PreprocessProfile::ICL_NUMERIC };
        let s = fit(&t, profile).unwrap();
        let ColumnTransform::Numeric { impute_value, .. } = s.columns[0].transform else { panic!() };
        assert_eq!(impute_value, 2.0);
    }

    #[test]
    fn categorical_codebook_and_mode() {
        let cats = vec!["a".to_string(), "b".to_string()];
        let t = table(
            vec![ColumnSchema::categorical("c", cats)],
            vec![Cell::Code(0), Cell::Code(1), Cell::Code(0)],
        );
        let s = fit(&t, PreprocessProfile::ICL_NUMERIC).unwrap();
        assert_eq!(
            s.columns[0].transform,
            ColumnTransform::Categorical { mode_code: 0, codebook: vec!["a".into(), "b".into()], unseen_code: 2 }
        );
    }

    #[test]
    fn all_missing_columns() {
        let t = table(
            vec![ColumnSchema::numeric("a"), ColumnSchema::categorical("c", vec![])],
            vec![Cell::Missing, Cell::Missing, Cell::Missing, Cell::Missing],
        );
        let s = fit(&t, PreprocessProfile::LINEAR_ONEHOT).unwrap();
        let ColumnTransform::Numeric { impute_value, std, .. } = s.columns[0].transform else { panic!() };
        assert_eq!(impute_value, 0.0);
        assert_eq!(std, 1e-12);
        let ColumnTransform::Categorical { codebook, .. } = &s.columns[1].transform else { panic!() };
        assert_eq!(codebook, &vec![MISSING_CATEGORY.to_string()]);
        let m = transform(&s, &t).unwrap();
        assert!(m.data.iter().all(|v| v.is_finite()));
        assert_eq!(m.cols, 3);
    }

    #[test]
    fn standardize_formula() {
        let s = PreprocessorState {
            profile: PreprocessProfile::ICL_NUMERIC,
            columns: vec![FittedColumn {
                name: "a".into(),
                kind: ColumnKind::Numeric,
                transform: ColumnTransform::Numeric { impute_value: 2.0, mean: 2.0, std: 1.0 },
            }],
            fitted_on_rows: 3,
        };
        let t = table(vec![ColumnSchema::numeric("a")], vec![Cell::Real(3.0)]);
        assert_eq!(transform(&s, &t).unwrap().data, vec![1.0]);
    }

    #[test]
    fn unseen_category_gets_reserved_code() {
        let train = table(
            vec![ColumnSchema::categorical("c", vec!["a".into(), "b".into()])],
            vec![Cell::Code(0), Cell::Code(1)],
        );
        let test = table(
            vec![ColumnSchema::categorical("c", vec!["z".into(), "b".into()])],
            vec![Cell::Code(0), Cell::Code(1)],
        );
        let s = fit(&train, PreprocessProfile::ICL_NUMERIC).unwrap();
        assert_eq!(transform(&s, &test).unwrap().data, vec![2.0, 1.0]);
        let s = fit(&train, PreprocessProfile::LINEAR_ONEHOT).unwrap();
        assert_eq!(transform(&s, &test).unwrap().data, vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn schema_mismatch() {
        let train = table(vec![ColumnSchema::numeric("a")], vec![Cell::Real(1.0)]);
        let other = table(vec![ColumnSchema::numeric("b")], vec![Cell::Real(1.0)]);
        let s = fit(&train, PreprocessProfile::ICL_NUMERIC).unwrap();
        assert!(matches!(transform(&s, &other), Err(PreprocessError::SchemaMismatch(_))));
        let empty = Table::new(vec![ColumnSchema::numeric("a")], vec![]).unwrap();
        assert!(matches!(fit(&empty, PreprocessProfile::ICL_NUMERIC), Err(PreprocessError::EmptyTrainingSet)));
    }

    #[test]
    fn profiles_by_name() {
        assert_eq!(PreprocessProfile::by_name("icl-numeric").unwrap(), PreprocessProfile::ICL_NUMERIC);
        assert_eq!(PreprocessProfile::by_name("linear-onehot").unwrap(), PreprocessProfile::LINEAR_ONEHOT);
        assert!(PreprocessProfile::by_name("x").is_err());
    }
}
