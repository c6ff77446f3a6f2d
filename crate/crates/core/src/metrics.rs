//! Accuracy matrix, average accuracy, forgetting, confusion counts and the
//! experiment report files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::{classify_all, Classify};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stream_data::EmbeddingDataset;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `a[t][j]`: accuracy on split `j`'s test set after training stage `t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let t = rows.len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != t {
                return Err(Error::IncompleteMatrix(format!(
                    "row {i} has {} entries, expected {t}",
                    row.len()
                )));
            }
            if let Some(bad) = row.iter().flatten().find(|a| !(0.0..=1.0).contains(*a)) {
                return Err(Error::IncompleteMatrix(format!(
                    "entry {bad} outside [0, 1]"
                )));
            }
        }
        Ok(Self { rows })
    }

    /// Complete matrix from plain values.
    pub fn from_values(rows: &[Vec<f64>]) -> Result<Self> {
        Self::from_rows(
            rows.iter()
                .map(|r| r.iter().copied().map(Some).collect())
                .collect(),
        )
    }

    /// Appends the row of the next training stage.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if let Some(bad) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::IncompleteMatrix(format!(
                "entry {bad} outside [0, 1]"
            )));
        }
        self.rows.push(row.into_iter().map(Some).collect());
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(j)).copied().flatten()
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }

    fn last_row(&self) -> Result<Vec<f64>> {
        let last = self
            .rows
            .last()
            .ok_or(Error::IncompleteMatrix("no stages".into()))?;
        last.iter()
            .enumerate()
            .map(|(j, a)| {
                a.ok_or_else(|| Error::IncompleteMatrix(format!("last row is missing split {j}")))
            })
            .collect()
    }
}

/// Last-row mean weighted by the split test-set sizes.
pub fn final_average_accuracy(m: &AccuracyMatrix, split_sizes: &[usize]) -> Result<f64> {
    let last = m.last_row()?;
    if last.len() != split_sizes.len() {
        return Err(Error::IncompleteMatrix(format!(
            "{} splits but {} sizes",
            last.len(),
            split_sizes.len()
        )));
    }
    let total: usize = split_sizes.iter().sum();
    if total == 0 {
        return Err(Error::EmptyTestSet);
    }
    let hit: f64 = last
        .iter()
        .zip(split_sizes)
        .map(|(a, &s)| a * s as f64)
        .sum();
    Ok(hit / total as f64)
}

/// Mean drop from each earlier split's best accuracy to its final accuracy,
/// over splits `0..T−1`. Negative when accuracy only improved.
pub fn forgetting(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.stages();
    if t < 2 {
        return Err(Error::TooFewStages(t));
    }
    let entry = |s: usize, j: usize| {
        m.get(s, j)
            .ok_or_else(|| Error::IncompleteMatrix(format!("missing a[{s}][{j}]")))
    };
    let mut sum = 0.0;
    for j in 0..t - 1 {
        let mut best = f64::NEG_INFINITY;
        for s in j..t - 1 {
            best = best.max(entry(s, j)?);
        }
        sum += best - entry(t - 1, j)?;
    }
    Ok(sum / (t - 1) as f64)
}

/// Predictions for every example of `test`, in dataset order.
pub fn predict<T: Scalar, C: Classify<T>>(
    model: &C,
    test: &EmbeddingDataset<T>,
) -> Result<Vec<usize>> {
    let inputs: Vec<&[T]> = test
        .examples()
        .iter()
        .map(|e| e.vector.as_slice())
        .collect();
    classify_all(model, &inputs)
}

/// Accuracy on each split's test examples given precomputed predictions.
pub fn split_accuracies<T: Scalar>(
    predictions: &[usize],
    test: &EmbeddingDataset<T>,
    split_indices: &[Vec<usize>],
) -> Result<Vec<f64>> {
    split_indices
        .iter()
        .map(|idx| {
            if idx.is_empty() {
                return Err(Error::EmptyTestSet);
            }
            let hits = idx
                .iter()
                .filter(|&&i| predictions[i] == test.examples()[i].label)
                .count();
            Ok(hits as f64 / idx.len() as f64)
        })
        .collect()
}

/// One accuracy-matrix row: argmax over all classes, scored per split.
pub fn evaluate<T: Scalar, C: Classify<T>>(
    model: &C,
    test: &EmbeddingDataset<T>,
    split_indices: &[Vec<usize>],
) -> Result<Vec<f64>> {
    split_accuracies(&predict(model, test)?, test, split_indices)
}

/// `counts[true][predicted]`.
pub fn confusion_from<T: Scalar>(
    predictions: &[usize],
    test: &EmbeddingDataset<T>,
) -> Vec<Vec<u64>> {
    let k = test.n_classes();
    let mut counts = vec![vec![0u64; k]; k];
    for (ex, &p) in test.examples().iter().zip(predictions) {
        counts[ex.label][p] += 1;
    }
    counts
}

pub fn confusion<T: Scalar, C: Classify<T>>(
    model: &C,
    test: &EmbeddingDataset<T>,
) -> Result<Vec<Vec<u64>>> {
    Ok(confusion_from(&predict(model, test)?, test))
}

/// Outcome of one seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport<C> {
    pub schema_version: u32,
    /// Fully resolved configuration of the run, seed included.
    pub config: C,
    pub accuracy_matrix: AccuracyMatrix,
    pub split_test_sizes: Vec<usize>,
    pub final_accuracy: f64,
    /// Absent for single-split runs.
    pub forgetting: Option<f64>,
    /// Mean accuracy over the splits seen so far, after each stage.
    pub accuracy_curve: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
    /// Only field that varies between identical runs.
    pub train_seconds: f64,
}

impl<C> ExperimentReport<C> {
    pub fn new(
        config: C,
        accuracy_matrix: AccuracyMatrix,
        split_test_sizes: Vec<usize>,
        confusion: Vec<Vec<u64>>,
        train_seconds: f64,
    ) -> Result<Self> {
        let final_accuracy = final_average_accuracy(&accuracy_matrix, &split_test_sizes)?;
        let forgetting = match accuracy_matrix.stages() {
            0 | 1 => None,
            _ => Some(forgetting(&accuracy_matrix)?),
        };
        let accuracy_curve = (0..accuracy_matrix.stages())
            .map(|t| {
                let (hit, n) = (0..=t).fold((0.0, 0usize), |(hit, n), j| {
                    let a = accuracy_matrix.get(t, j).unwrap_or(0.0);
                    (
                        hit + a * split_test_sizes[j] as f64,
                        n + split_test_sizes[j],
                    )
                });
                hit / n.max(1) as f64
            })
            .collect();
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            config,
            accuracy_matrix,
            split_test_sizes,
            final_accuracy,
            forgetting,
            accuracy_curve,
            confusion,
            train_seconds,
        })
    }
}

/// Accuracy matrix as CSV: a row per stage, a column per split, blank when absent.
pub fn accuracy_csv(m: &AccuracyMatrix) -> String {
    let t = m.rows().first().map_or(0, Vec::len);
    let mut out = String::from("stage");
    for j in 0..t {
        out.push_str(&format!(",split_{j}"));
    }
    out.push('\n');
    for (s, row) in m.rows().iter().enumerate() {
        out.push_str(&s.to_string());
        for a in row {
            out.push(',');
            if let Some(a) = a {
                out.push_str(&a.to_string());
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `<stem>.json` and `<stem>.accuracy.csv`; returns both paths.
pub fn write_report<C: Serialize>(
    r: &ExperimentReport<C>,
    json_path: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let json = serde_json::to_string_pretty(r)?;
    fs::write(json_path, json + "\n").map_err(|e| Error::file(json_path, e))?;
    let csv_path = json_path.with_extension("accuracy.csv");
    fs::write(&csv_path, accuracy_csv(&r.accuracy_matrix))
        .map_err(|e| Error::file(&csv_path, e))?;
    Ok((json_path.to_path_buf(), csv_path))
}

pub fn read_report<C: for<'de> Deserialize<'de>>(path: &Path) -> Result<ExperimentReport<C>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
