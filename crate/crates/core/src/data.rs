//! Tabular data: CSV ingestion with a JSON schema, one-hot encoding of
//! categorical columns, z-scoring, and the first-order feature function used
//! by every model.
//!
//! A [`Dataset`] holds covariates `x`, the binary protected attribute `a` and,
//! when available, the binary label `y`. Rows of the target sample carry no
//! labels at all; see [`crate::shift`] for how sealed labels travel.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps the columns of a raw CSV file onto the model's view of a row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub label_column: String,
    pub attribute_column: String,
    /// Raw label value that maps to `y = 1`.
    pub positive_label_value: String,
    /// Raw attribute value that maps to `a = 1`.
    pub privileged_attribute_value: String,
    #[serde(default)]
    pub categorical_columns: Vec<String>,
}

impl SchemaConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let schema: SchemaConfig = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_column == self.attribute_column {
            return Err(Error::Schema(format!(
                "label and attribute column are both `{}`",
                self.label_column
            )));
        }
        if self.categorical_columns.iter().any(|c| c == &self.label_column || c == &self.attribute_column) {
            return Err(Error::Schema(
                "label/attribute columns cannot also be listed as categorical".into(),
            ));
        }
        Ok(())
    }

    /// Schema for files written by [`write_csv`]: already encoded, `1` marks
    /// both the positive label and the privileged group.
    pub fn encoded(label_column: &str, attribute_column: &str) -> Self {
        SchemaConfig {
            label_column: label_column.to_string(),
            attribute_column: attribute_column.to_string(),
            positive_label_value: "1".into(),
            privileged_attribute_value: "1".into(),
            categorical_columns: Vec::new(),
        }
    }
}

/// Whether the label column must be present in a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelPolicy {
    Required,
    /// Read labels if the column exists, otherwise produce an unlabeled dataset.
    Optional,
    /// Never read labels even if the column exists.
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    attribute: Vec<u8>,
    labels: Option<Vec<u8>>,
    feature_names: Vec<String>,
    /// Per feature column: true if it is a one-hot indicator.
    categorical: Vec<bool>,
}

impl Dataset {
    pub fn new(
        features: DMatrix<f64>,
        attribute: Vec<u8>,
        labels: Option<Vec<u8>>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let categorical = vec![false; features.ncols()];
        Self::with_categorical(features, attribute, labels, feature_names, categorical)
    }

    pub fn with_categorical(
        features: DMatrix<f64>,
        attribute: Vec<u8>,
        labels: Option<Vec<u8>>,
        feature_names: Vec<String>,
        categorical: Vec<bool>,
    ) -> Result<Self> {
        let n = features.nrows();
        if attribute.len() != n {
            return Err(Error::Data(format!("{} attribute values for {n} rows", attribute.len())));
        }
        if let Some(y) = &labels {
            if y.len() != n {
                return Err(Error::Data(format!("{} labels for {n} rows", y.len())));
            }
            if let Some(bad) = y.iter().find(|&&v| v > 1) {
                return Err(Error::Value(format!("label value {bad} is not 0 or 1")));
            }
        }
        if let Some(bad) = attribute.iter().find(|&&v| v > 1) {
            return Err(Error::Value(format!("attribute value {bad} is not 0 or 1")));
        }
        if feature_names.len() != features.ncols() || categorical.len() != features.ncols() {
            return Err(Error::Data("feature metadata does not match column count".into()));
        }
        if let Some((idx, _)) = features.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (row, col) = (idx % n.max(1), idx / n.max(1));
            return Err(Error::Value(format!(
                "non-finite value at row {row}, column `{}`",
                feature_names[col]
            )));
        }
        Ok(Dataset { features, attribute, labels, feature_names, categorical })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn attribute(&self) -> &[u8] {
        &self.attribute
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[u8]> {
        self.labels().ok_or_else(|| Error::Data("dataset has no labels".into()))
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn categorical(&self) -> &[bool] {
        &self.categorical
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.features.row(i).iter().copied().collect()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let features = self.features.select_rows(indices.iter());
        Dataset {
            features,
            attribute: indices.iter().map(|&i| self.attribute[i]).collect(),
            labels: self.labels.as_ref().map(|y| indices.iter().map(|&i| y[i]).collect()),
            feature_names: self.feature_names.clone(),
            categorical: self.categorical.clone(),
        }
    }

    /// Splits off the labels, returning an unlabeled copy and the label vector.
    pub fn split_labels(mut self) -> (Dataset, Option<Vec<u8>>) {
        let labels = self.labels.take();
        (self, labels)
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Dataset> {
        if labels.len() != self.n() {
            return Err(Error::Data(format!("{} labels for {} rows", labels.len(), self.n())));
        }
        if let Some(bad) = labels.iter().find(|&&v| v > 1) {
            return Err(Error::Value(format!("label value {bad} is not 0 or 1")));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Covariates augmented with the attribute as a last column, `(x, a)`.
    pub fn covariates_with_attribute(&self) -> DMatrix<f64> {
        let n = self.n();
        let d = self.d();
        DMatrix::from_fn(n, d + 1, |i, j| {
            if j < d {
                self.features[(i, j)]
            } else {
                f64::from(self.attribute[i])
            }
        })
    }
}

/// Reads a CSV file whose header contains the schema's label and attribute columns.
pub fn load_csv(path: impl AsRef<Path>, schema: &SchemaConfig) -> Result<Dataset> {
    load_csv_with(path, schema, LabelPolicy::Required)
}

pub fn load_csv_with(
    path: impl AsRef<Path>,
    schema: &SchemaConfig,
    policy: LabelPolicy,
) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema, policy)
}

pub fn read_csv<R: Read>(reader: R, schema: &SchemaConfig, policy: LabelPolicy) -> Result<Dataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Data("file is empty".into()));
    }
    let find = |name: &str| header.iter().position(|h| h == name);

    let attr_idx = find(&schema.attribute_column)
        .ok_or_else(|| Error::Schema(format!("attribute column `{}` not in header", schema.attribute_column)))?;
    let label_idx = match (find(&schema.label_column), policy) {
        (Some(_), LabelPolicy::Ignore) => None,
        (Some(i), _) => Some(i),
        (None, LabelPolicy::Required) => {
            return Err(Error::Schema(format!("label column `{}` not in header", schema.label_column)))
        }
        (None, _) => None,
    };
    for c in &schema.categorical_columns {
        if find(c).is_none() {
            return Err(Error::Schema(format!("categorical column `{c}` not in header")));
        }
    }
    let skip = |i: usize| i == attr_idx || Some(i) == label_idx || header[i] == schema.label_column;
    let feature_cols: Vec<usize> = (0..header.len()).filter(|&i| !skip(i)).collect();

    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Data(format!(
                "row {} has {} fields, header has {}",
                records.len() + 1,
                rec.len(),
                header.len()
            )));
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Data("file has a header but no rows".into()));
    }

    let attribute = map_binary(&records, attr_idx, &schema.privileged_attribute_value, &schema.attribute_column)?;
    let labels = label_idx
        .map(|i| map_binary(&records, i, &schema.positive_label_value, &schema.label_column))
        .transpose()?;

    // Expand each source column into one or more encoded columns.
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    let mut categorical = Vec::new();
    for &c in &feature_cols {
        let name = &header[c];
        if schema.categorical_columns.contains(name) {
            let levels: BTreeSet<&str> = records.iter().map(|r| &r[c]).collect();
            for level in levels {
                columns.push(records.iter().map(|r| if &r[c] == level { 1.0 } else { 0.0 }).collect());
                names.push(format!("{name}={level}"));
                categorical.push(true);
            }
        } else {
            let mut col = Vec::with_capacity(records.len());
            for (row, r) in records.iter().enumerate() {
                let v: f64 = r[c].parse().map_err(|_| {
                    Error::Value(format!("row {}: `{}` in column `{name}` is not numeric", row + 1, &r[c]))
                })?;
                if !v.is_finite() {
                    return Err(Error::Value(format!("row {}: non-finite value in column `{name}`", row + 1)));
                }
                col.push(v);
            }
            columns.push(col);
            names.push(name.clone());
            categorical.push(false);
        }
    }
    let n = records.len();
    let features = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
    Dataset::with_categorical(features, attribute, labels, names, categorical)
}

/// `positive` maps to 1; a single other distinct value maps to 0.
fn map_binary(records: &[csv::StringRecord], col: usize, positive: &str, name: &str) -> Result<Vec<u8>> {
    let mut negative: Option<&str> = None;
    let mut out = Vec::with_capacity(records.len());
    for (row, r) in records.iter().enumerate() {
        let raw = &r[col];
        if raw.is_empty() {
            return Err(Error::Value(format!("row {}: empty value in column `{name}`", row + 1)));
        }
        if raw == positive {
            out.push(1);
            continue;
        }
        match negative {
            None => {
                negative = Some(raw);
                out.push(0);
            }
            Some(neg) if neg == raw => out.push(0),
            Some(neg) => {
                return Err(Error::Value(format!(
                    "row {}: column `{name}` has a third value `{raw}` (expected `{positive}` or `{neg}`)",
                    row + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Writes the encoded dataset: feature columns, then the attribute, then
/// (if present and requested) the label, each binary column as 0/1.
pub fn write_csv<W: Write>(
    writer: W,
    data: &Dataset,
    attribute_column: &str,
    label_column: Option<&str>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = data.feature_names.iter().map(String::as_str).collect();
    header.push(attribute_column);
    let labels = match (label_column, data.labels()) {
        (Some(name), Some(y)) => {
            header.push(name);
            Some(y)
        }
        _ => None,
    };
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec: Vec<String> = data.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(data.attribute[i].to_string());
        if let Some(y) = labels {
            rec.push(y[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnSelection {
    /// Every non-categorical column.
    AllNumeric,
    Indices(Vec<usize>),
}

/// Standardizes the selected columns with the population standard deviation.
/// A constant column becomes all zeros.
pub fn zscore_normalize(data: &Dataset, columns: &ColumnSelection) -> Result<Dataset> {
    let cols: Vec<usize> = match columns {
        ColumnSelection::AllNumeric => (0..data.d()).filter(|&j| !data.categorical[j]).collect(),
        ColumnSelection::Indices(ix) => {
            for &j in ix {
                if j >= data.d() {
                    return Err(Error::Schema(format!("column index {j} out of range")));
                }
                if data.categorical[j] {
                    return Err(Error::Schema(format!(
                        "column `{}` is categorical and cannot be z-scored",
                        data.feature_names[j]
                    )));
                }
            }
            ix.clone()
        }
    };
    let mut out = data.clone();
    let n = data.n() as f64;
    for j in cols {
        let col = data.features.column(j);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        let mut dst = out.features.column_mut(j);
        if sd <= f64::EPSILON * mean.abs().max(1.0) {
            dst.fill(0.0);
        } else {
            for v in dst.iter_mut() {
                *v = (*v - mean) / sd;
            }
        }
    }
    Ok(out)
}

/// Settings of the first-order feature function `phi(x, a, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub include_attribute: bool,
    pub include_intercept: bool,
}

impl Default for FeatureMap {
    fn default() -> Self {
        FeatureMap { include_attribute: true, include_intercept: true }
    }
}

impl FeatureMap {
    /// Length of `phi` for `d` raw covariates.
    pub fn dimension(&self, d: usize) -> usize {
        d + usize::from(self.include_attribute) + usize::from(self.include_intercept)
    }

    /// Feature vector for label `y`; the zero vector when `y == 0`.
    pub fn phi(&self, x: &[f64], a: u8, y: u8) -> Vec<f64> {
        let m = self.dimension(x.len());
        if y == 0 {
            return vec![0.0; m];
        }
        let mut v = Vec::with_capacity(m);
        v.extend_from_slice(x);
        if self.include_attribute {
            v.push(f64::from(a));
        }
        if self.include_intercept {
            v.push(1.0);
        }
        v
    }

    /// Row `i` is `phi(x_i, a_i, 1)`. Since `phi(., 0) = 0`, this is also the
    /// per-row difference `phi(x, 1) - phi(x, 0)`.
    pub fn design_matrix(&self, data: &Dataset) -> DMatrix<f64> {
        let d = data.d();
        let m = self.dimension(d);
        let mut out = DMatrix::zeros(data.n(), m);
        out.view_mut((0, 0), (data.n(), d)).copy_from(&data.features);
        let mut j = d;
        if self.include_attribute {
            for i in 0..data.n() {
                out[(i, j)] = f64::from(data.attribute[i]);
            }
            j += 1;
        }
        if self.include_intercept {
            out.column_mut(j).fill(1.0);
        }
        out
    }
}

/// Convenience: `phi` as a free function.
pub fn phi(x: &[f64], a: u8, y: u8, map: &FeatureMap) -> Vec<f64> {
    map.phi(x, a, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> SchemaConfig {
        SchemaConfig {
            label_column: "y".into(),
            attribute_column: "sex".into(),
            positive_label_value: "good".into(),
            privileged_attribute_value: "male".into(),
            categorical_columns: vec!["c".into()],
        }
    }

    #[test]
    fn one_hot_expands_categorical_column() {
        let csv = "x,c,sex,y\n1.5,u,male,good\n2,v,female,bad\n3,u,male,bad\n";
        let ds = read_csv(csv.as_bytes(), &schema(), LabelPolicy::Required).unwrap();
        assert_eq!(ds.feature_names(), &["x", "c=u", "c=v"]);
        assert_eq!(ds.d(), 3);
        let ind: Vec<(f64, f64)> = (0..3).map(|i| (ds.features()[(i, 1)], ds.features()[(i, 2)])).collect();
        assert_eq!(ind, vec![(1.0, 0.0), (0.0, 1.0), (1.0, 0.0)]);
        assert_eq!(ds.attribute(), &[1, 0, 1]);
        assert_eq!(ds.labels().unwrap(), &[1, 0, 0]);
        assert_eq!(ds.categorical(), &[false, true, true]);
    }

    #[test]
    fn missing_attribute_column_is_schema_error() {
        let csv = "x,c,y\n1,u,good\n";
        let err = read_csv(csv.as_bytes(), &schema(), LabelPolicy::Required).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn missing_label_column_is_schema_error_only_when_required() {
        let csv = "x,c,sex\n1,u,male\n2,v,female\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &schema(), LabelPolicy::Required),
            Err(Error::Schema(_))
        ));
        let ds = read_csv(csv.as_bytes(), &schema(), LabelPolicy::Optional).unwrap();
        assert!(ds.labels().is_none());
    }

    #[test]
    fn third_label_value_is_value_error() {
        let csv = "x,c,sex,y\n1,u,male,good\n2,u,male,bad\n3,u,male,ugly\n";
        let err = read_csv(csv.as_bytes(), &schema(), LabelPolicy::Required).unwrap_err();
        assert!(matches!(err, Error::Value(_)), "{err}");
    }

    #[test]
    fn non_numeric_feature_is_value_error() {
        let csv = "x,c,sex,y\nabc,u,male,good\n";
        assert!(matches!(read_csv(csv.as_bytes(), &schema(), LabelPolicy::Required), Err(Error::Value(_))));
        let csv = "x,c,sex,y\nNaN,u,male,good\n";
        assert!(matches!(read_csv(csv.as_bytes(), &schema(), LabelPolicy::Required), Err(Error::Value(_))));
    }

    #[test]
    fn empty_file_is_data_error() {
        assert!(matches!(read_csv("".as_bytes(), &schema(), LabelPolicy::Required), Err(Error::Data(_))));
        let csv = "x,c,sex,y\n";
        assert!(matches!(read_csv(csv.as_bytes(), &schema(), LabelPolicy::Required), Err(Error::Data(_))));
    }

    #[test]
    fn same_label_and_attribute_column_rejected() {
        let mut s = schema();
        s.attribute_column = "y".into();
        assert!(matches!(s.validate(), Err(Error::Schema(_))));
    }

    fn column(values: &[f64]) -> Dataset {
        let n = values.len();
        Dataset::new(DMatrix::from_column_slice(n, 1, values), vec![0; n], None, vec!["v".into()]).unwrap()
    }

    #[test]
    fn zscore_matches_population_formula() {
        let out = zscore_normalize(&column(&[1.0, 2.0, 3.0]), &ColumnSelection::AllNumeric).unwrap();
        // oracle: (x - 2) / sqrt(2/3)
        let sd = (2.0f64 / 3.0).sqrt();
        let expect = [-1.0 / sd, 0.0, 1.0 / sd];
        for (got, want) in out.features().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((expect[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn zscore_constant_column_is_zero() {
        let out = zscore_normalize(&column(&[5.0, 5.0, 5.0]), &ColumnSelection::AllNumeric).unwrap();
        assert!(out.features().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zscore_skips_indicator_columns_and_rejects_explicit_selection() {
        let csv = "x,c,sex,y\n1,u,male,good\n2,v,female,bad\n3,u,male,bad\n";
        let ds = read_csv(csv.as_bytes(), &schema(), LabelPolicy::Required).unwrap();
        let out = zscore_normalize(&ds, &ColumnSelection::AllNumeric).unwrap();
        assert_eq!(out.features().column(1), ds.features().column(1));
        assert!(zscore_normalize(&ds, &ColumnSelection::Indices(vec![1])).is_err());
    }

    #[test]
    fn phi_augments_with_attribute_and_intercept() {
        let map = FeatureMap::default();
        assert_eq!(map.phi(&[0.5, -1.0], 1, 1), vec![0.5, -1.0, 1.0, 1.0]);
        assert_eq!(map.phi(&[0.5, -1.0], 1, 0), vec![0.0; 4]);
        let bare = FeatureMap { include_attribute: false, include_intercept: false };
        assert_eq!(phi(&[2.0], 0, 1, &bare), vec![2.0]);
    }

    #[test]
    fn design_matrix_rows_equal_phi_difference() {
        let ds = Dataset::new(
            DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 3.0, 4.0]),
            vec![1, 0],
            None,
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let map = FeatureMap::default();
        let dm = map.design_matrix(&ds);
        for i in 0..2 {
            let x = ds.row(i);
            let one = map.phi(&x, ds.attribute()[i], 1);
            let zero = map.phi(&x, ds.attribute()[i], 0);
            let diff: Vec<f64> = one.iter().zip(&zero).map(|(p, q)| p - q).collect();
            let row: Vec<f64> = dm.row(i).iter().copied().collect();
            assert_eq!(diff, one);
            assert_eq!(row, diff);
        }
    }

    #[test]
    fn write_then_read_encoded() {
        let csv = "x,c,sex,y\n1.5,u,male,good\n2,v,female,bad\n";
        let ds = read_csv(csv.as_bytes(), &schema(), LabelPolicy::Required).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &ds, "sex", Some("y")).unwrap();
        let back = read_csv(buf.as_slice(), &SchemaConfig::encoded("y", "sex"), LabelPolicy::Required).unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.attribute(), ds.attribute());
        assert_eq!(back.labels(), ds.labels());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn zscore_is_idempotent(values in proptest::collection::vec(-100.0f64..100.0, 2..40)) {
                let once = zscore_normalize(&column(&values), &ColumnSelection::AllNumeric).unwrap();
                let twice = zscore_normalize(&once, &ColumnSelection::AllNumeric).unwrap();
                for (a, b) in once.features().iter().zip(twice.features().iter()) {
                    prop_assert!((a - b).abs() < 1e-10);
                }
            }

            #[test]
            fn one_hot_rows_have_single_indicator(levels in proptest::collection::vec(0u8..4, 1..30)) {
                let mut csv = String::from("c,sex,y\n");
                for l in &levels {
                    csv.push_str(&format!("L{l},male,good\n"));
                }
                let ds = read_csv(csv.as_bytes(), &schema(), LabelPolicy::Required).unwrap();
                for i in 0..ds.n() {
                    let s: f64 = ds.features().row(i).iter().sum();
                    prop_assert_eq!(s, 1.0);
                }
            }
        }
    }
}
