//! Tabular dataset ingestion and preprocessing.
//!
//! CSV in, scaled feature matrices out. All statistics (column kinds,
//! category vocabularies, min/max, imputation values) are fitted on the
//! training rows only and then applied to every split. Features are min-max
//! scaled so training rows land in `[-1, 1]`, the default spline range;
//! validation and test rows may fall outside and are clamped to
//! `[-1.5, 1.5]`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};
use crate::rng::seeded_rng;

pub const FEATURE_CLAMP: f64 = 1.5;

/// Raw string cells with missing values as `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Option<String>>>,
    pub label_column: usize,
}

impl RawTable {
    pub fn new(headers: Vec<String>, rows: Vec<Vec<Option<String>>>) -> Result<Self> {
        if headers.len() < 2 {
            return Err(KanError::Data("a table needs at least one feature and a label".into()));
        }
        if let Some(r) = rows.iter().position(|r| r.len() != headers.len()) {
            return Err(KanError::Data(format!(
                "row {r} has {} cells, header has {}",
                rows[r].len(),
                headers.len()
            )));
        }
        let label_column = headers.len() - 1;
        Ok(Self {
            headers,
            rows,
            label_column,
        })
    }

    pub fn with_label_column(mut self, name: &str) -> Result<Self> {
        self.label_column = self
            .headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| KanError::Data(format!("no column named `{name}`")))?;
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn feature_columns(&self) -> Vec<usize> {
        (0..self.headers.len()).filter(|&c| c != self.label_column).collect()
    }
}

/// Read a comma-separated file with a header row. Empty cells are missing.
pub fn load_csv(path: &Path) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(&e))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_error(&e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&e))?;
        rows.push(
            record
                .iter()
                .map(|c| (!c.is_empty()).then(|| c.to_string()))
                .collect(),
        );
    }
    RawTable::new(headers, rows)
}

fn csv_error(e: &csv::Error) -> KanError {
    if let csv::ErrorKind::Io(io) = e.kind() {
        return KanError::Io(std::io::Error::new(io.kind(), io.to_string()));
    }
    KanError::Csv {
        line: e.position().map(|p| p.line()).unwrap_or(0),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

/// Fitted preprocessing for one feature column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub column: usize,
    pub kind: ColumnKind,
    /// Sorted training categories; code `vocabulary.len()` means unknown.
    pub vocabulary: Vec<String>,
    /// Range of the raw value (numeric) or code (categorical) on train rows.
    pub min: f64,
    pub max: f64,
    /// Imputed raw value: train median, or the code of the train mode.
    pub fill: f64,
    pub missing_in_train: bool,
}

impl ColumnSpec {
    pub fn unknown_code(&self) -> usize {
        self.vocabulary.len()
    }

    /// Raw value or code for one cell, before scaling.
    pub fn encode(&self, cell: Option<&str>) -> f64 {
        match (self.kind, cell) {
            (_, None) => self.fill,
            (ColumnKind::Numeric, Some(s)) => match s.parse::<f64>() {
                Ok(v) if v.is_finite() => v,
                _ => self.fill,
            },
            (ColumnKind::Categorical, Some(s)) => self
                .vocabulary
                .binary_search_by(|v| v.as_str().cmp(s))
                .unwrap_or(self.unknown_code()) as f64,
        }
    }

    /// Min-max map onto `[-1, 1]`; a zero-width range maps to 0.
    pub fn scale(&self, raw: f64) -> f64 {
        let width = self.max - self.min;
        if width > 0.0 {
            (2.0 * (raw - self.min) / width - 1.0).clamp(-FEATURE_CLAMP, FEATURE_CLAMP)
        } else {
            0.0
        }
    }

    pub fn unscale(&self, scaled: f64) -> f64 {
        self.min + (scaled + 1.0) / 2.0 * (self.max - self.min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub columns: Vec<ColumnSpec>,
    pub label_column: usize,
    /// Class names in code order.
    pub classes: Vec<String>,
}

impl ColumnSchema {
    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_code(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Class vocabulary over every labelled row, ordered numerically when all
/// labels parse as numbers and lexicographically otherwise.
fn class_vocabulary(table: &RawTable) -> Vec<String> {
    let set: BTreeSet<&str> = table
        .rows
        .iter()
        .filter_map(|r| r[table.label_column].as_deref())
        .collect();
    let mut classes: Vec<String> = set.into_iter().map(str::to_string).collect();
    if classes.iter().all(|c| c.parse::<f64>().is_ok()) {
        classes.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    classes
}

/// Fit column kinds, vocabularies, ranges and imputation values on the given
/// training rows. Class names come from every labelled row of the table.
pub fn fit_schema(table: &RawTable, train_rows: &[usize]) -> Result<ColumnSchema> {
    if let Some(&bad) = train_rows.iter().find(|&&r| r >= table.n_rows()) {
        return Err(KanError::Data(format!("row index {bad} out of range")));
    }
    let mut columns = Vec::new();
    for col in table.feature_columns() {
        let cells: Vec<Option<&str>> = train_rows.iter().map(|&r| table.rows[r][col].as_deref()).collect();
        let present: Vec<&str> = cells.iter().flatten().copied().collect();
        let missing_in_train = present.len() < cells.len();
        let parsed: Vec<f64> = present.iter().filter_map(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite()).collect();
        let spec = if !present.is_empty() && parsed.len() == present.len() {
            let mut values = parsed;
            let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            ColumnSpec {
                name: table.headers[col].clone(),
                column: col,
                kind: ColumnKind::Numeric,
                vocabulary: Vec::new(),
                min,
                max,
                fill: median(&mut values),
                missing_in_train,
            }
        } else {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for s in &present {
                *counts.entry(s).or_default() += 1;
            }
            let vocabulary: Vec<String> = counts.keys().map(|s| s.to_string()).collect();
            // BTreeMap iteration is sorted, so the first maximum is the smallest name
            let mode = counts
                .iter()
                .enumerate()
                .fold((0usize, 0usize), |best, (code, (_, &n))| if n > best.1 { (code, n) } else { best })
                .0;
            ColumnSpec {
                name: table.headers[col].clone(),
                column: col,
                kind: ColumnKind::Categorical,
                min: 0.0,
                max: vocabulary.len().saturating_sub(1) as f64,
                vocabulary,
                fill: mode as f64,
                missing_in_train,
            }
        };
        columns.push(spec);
    }
    Ok(ColumnSchema {
        columns,
        label_column: table.label_column,
        classes: class_vocabulary(table),
    })
}

/// Scaled features and dense labels for a set of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transformed {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    /// Source rows that made it into the output, in output order.
    pub rows: Vec<usize>,
    /// Source rows dropped because their label was missing or unknown.
    pub rejected: Vec<usize>,
}

pub fn transform(table: &RawTable, schema: &ColumnSchema) -> Transformed {
    let all: Vec<usize> = (0..table.n_rows()).collect();
    transform_rows(table, schema, &all)
}

pub fn transform_rows(table: &RawTable, schema: &ColumnSchema, rows: &[usize]) -> Transformed {
    let mut kept = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    let mut rejected = Vec::new();
    for &r in rows {
        match table.rows[r][schema.label_column].as_deref().and_then(|l| schema.class_code(l)) {
            Some(code) => {
                kept.push(r);
                labels.push(code);
            }
            None => rejected.push(r),
        }
    }
    let features = Array2::from_shape_fn((kept.len(), schema.n_features()), |(k, f)| {
        let spec = &schema.columns[f];
        spec.scale(spec.encode(table.rows[kept[k]][spec.column].as_deref()))
    });
    Transformed {
        features,
        labels,
        rows: kept,
        rejected,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            valid: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// Gather a subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Split {
        Split {
            features: self.features.select(ndarray::Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Preprocessed train/validation/test splits plus everything needed to
/// replay them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Split,
    pub valid: Split,
    pub test: Split,
    pub n_classes: usize,
    pub schema: ColumnSchema,
    pub indices: SplitIndices,
    pub fractions: SplitFractions,
    pub seed: u64,
    pub rejected_rows: Vec<usize>,
}

pub const MIN_ROWS: usize = 10;

/// Seeded shuffle, contiguous partition by `fractions`, schema fitted on the
/// training part only.
pub fn split(table: &RawTable, fractions: SplitFractions, seed: u64) -> Result<DatasetSplits> {
    let SplitFractions { train, valid, test } = fractions;
    if [train, valid, test].iter().any(|f| !(0.0..=1.0).contains(f)) || ((train + valid + test) - 1.0).abs() > 1e-9 {
        return Err(KanError::Data(format!(
            "split fractions {train}/{valid}/{test} must be non-negative and sum to 1"
        )));
    }
    let (mut order, rejected_rows): (Vec<usize>, Vec<usize>) =
        (0..table.n_rows()).partition(|&r| table.rows[r][table.label_column].is_some());
    if order.len() < MIN_ROWS {
        return Err(KanError::Data(format!(
            "need at least {MIN_ROWS} labelled rows, found {}",
            order.len()
        )));
    }
    order.shuffle(&mut seeded_rng(seed));
    let n = order.len();
    let n_train = (train * n as f64).round() as usize;
    let n_valid = ((valid * n as f64).round() as usize).min(n - n_train);
    let indices = SplitIndices {
        train: order[..n_train].to_vec(),
        valid: order[n_train..n_train + n_valid].to_vec(),
        test: order[n_train + n_valid..].to_vec(),
    };
    let schema = fit_schema(table, &indices.train)?;
    let part = |rows: &[usize]| {
        let t = transform_rows(table, &schema, rows);
        Split {
            features: t.features,
            labels: t.labels,
        }
    };
    Ok(DatasetSplits {
        train: part(&indices.train),
        valid: part(&indices.valid),
        test: part(&indices.test),
        n_classes: schema.n_classes(),
        schema,
        indices,
        fractions,
        seed,
        rejected_rows,
    })
}

impl DatasetSplits {
    pub fn n_features(&self) -> usize {
        self.train.n_features()
    }

    /// Most frequent class on the training split (lowest code on ties).
    pub fn majority_class(&self) -> usize {
        let mut counts = vec![0usize; self.n_classes];
        for &l in &self.train.labels {
            counts[l] += 1;
        }
        counts
            .iter()
            .enumerate()
            .fold((0, 0), |best, (c, &n)| if n > best.1 { (c, n) } else { best })
            .0
    }

    /// Two-class view: label 1 for `positive`, 0 otherwise.
    pub fn one_vs_rest(&self, positive: usize) -> DatasetSplits {
        let relabel = |s: &Split| Split {
            features: s.features.clone(),
            labels: s.labels.iter().map(|&l| (l == positive) as usize).collect(),
        };
        let mut schema = self.schema.clone();
        schema.classes = vec![
            format!("not_{}", self.schema.classes[positive]),
            self.schema.classes[positive].clone(),
        ];
        DatasetSplits {
            train: relabel(&self.train),
            valid: relabel(&self.valid),
            test: relabel(&self.test),
            n_classes: 2,
            schema,
            ..self.clone()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Two Gaussian blobs in the plane, centred at `(-1, -1)` and `(1, 1)` with
/// standard deviation 0.35, labelled `a` and `b` alternately.
pub fn toy_blobs(n: usize, seed: u64) -> RawTable {
    let mut rng = seeded_rng(seed);
    let noise = Normal::new(0.0, 0.35).unwrap();
    let rows = (0..n)
        .map(|k| {
            let (centre, label) = if k % 2 == 0 { (-1.0, "a") } else { (1.0, "b") };
            let x0: f64 = centre + noise.sample(&mut rng);
            let x1: f64 = centre + noise.sample(&mut rng);
            vec![
                Some(format!("{x0}")),
                Some(format!("{x1}")),
                Some(label.to_string()),
            ]
        })
        .collect();
    RawTable::new(vec!["x0".into(), "x1".into(), "label".into()], rows).expect("fixed shape")
}

/// Write a table back out as CSV (missing cells become empty).
pub fn write_csv(table: &RawTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(&e))?;
    w.write_record(&table.headers).map_err(|e| csv_error(&e))?;
    for row in &table.rows {
        w.write_record(row.iter().map(|c| c.as_deref().unwrap_or("")))
            .map_err(|e| csv_error(&e))?;
    }
    w.flush()?;
    Ok(())
}

/// Shuffle helper shared by the trainer: a fresh permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
