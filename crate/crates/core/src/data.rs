//! Datasets, normalisation and the stratified fold schedule.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Binary-labelled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<u8>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidArgument(format!("label {l} not in {{0, 1}}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// `(negatives, positives)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (self.labels.len() - pos, pos)
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Two unit-variance spherical Gaussians whose means sit `separation` apart
/// along the first axis (at `∓separation/2`). Rows alternate label 0, 1.
pub fn generate_synthetic<R: Rng + ?Sized>(
    n: usize,
    dim: usize,
    separation: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "synthetic size {n} must be even and positive"
        )));
    }
    if dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dimension {dim} must be at least 2"
        )));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::InvalidArgument(format!("separation {separation}")));
    }
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let mut features = Array2::<f64>::zeros((n, dim));
    for (mut row, &label) in features.rows_mut().into_iter().zip(&labels) {
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        row[0] += if label == 1 {
            separation / 2.0
        } else {
            -separation / 2.0
        };
    }
    Dataset::new(features, labels)
}

/// Per-feature statistics used to standardise data.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Floor for the population standard deviation of a column.
pub const STD_FLOOR: f64 = 1e-12;

impl Normalizer {
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot normalise an empty dataset".into(),
            ));
        }
        let n = dataset.len() as f64;
        let mean = dataset
            .features
            .mean_axis(Axis(0))
            .expect("non-empty")
            .to_vec();
        let std = dataset
            .features
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(col, m)| {
                let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                var.sqrt().max(STD_FLOOR)
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        if dataset.dim() != self.mean.len() {
            return Err(Error::Shape(format!(
                "dataset has {} features, statistics cover {}",
                dataset.dim(),
                self.mean.len()
            )));
        }
        let mut features = dataset.features.clone();
        for (j, mut col) in features.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        Ok(Dataset {
            features,
            labels: dataset.labels.clone(),
        })
    }
}

/// Standardise every column; returns the statistics so held-out data can be
/// mapped the same way.
pub fn normalize(dataset: &Dataset) -> Result<(Dataset, Normalizer)> {
    let stats = Normalizer::fit(dataset)?;
    let out = stats.apply(dataset)?;
    Ok((out, stats))
}

/// Folds needed for `clients` clients over `rounds` rounds: one per client per
/// round, one per round for the server, plus the initial global fold.
pub fn fold_budget(clients: usize, rounds: usize) -> usize {
    (1 + clients) * rounds + 1
}

/// FIFO queue of disjoint, equally sized, class-stratified index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSchedule {
    folds: VecDeque<Vec<usize>>,
    consumed: usize,
}

impl FoldSchedule {
    /// Shuffle each class by seed and deal its members round-robin over
    /// `n_folds` folds. Each class contributes `⌊n_c / n_folds⌋` members to
    /// every fold; leftovers are dropped so all folds have the same size.
    pub fn stratified<R: Rng + ?Sized>(
        dataset: &Dataset,
        n_folds: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_folds == 0 {
            return Err(Error::InvalidArgument("zero folds requested".into()));
        }
        let (neg, pos) = dataset.class_counts();
        if neg < n_folds || pos < n_folds {
            return Err(Error::DatasetTooSmall {
                folds: n_folds,
                required: n_folds,
                found_negative: neg,
                found_positive: pos,
            });
        }
        let mut folds = vec![Vec::new(); n_folds];
        for class in [0u8, 1] {
            let mut members: Vec<usize> = (0..dataset.len())
                .filter(|&i| dataset.labels[i] == class)
                .collect();
            members.shuffle(rng);
            let per_fold = members.len() / n_folds;
            for (slot, &idx) in members.iter().take(per_fold * n_folds).enumerate() {
                folds[slot % n_folds].push(idx);
            }
        }
        Ok(Self {
            folds: folds.into(),
            consumed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn folds(&self) -> impl Iterator<Item = &[usize]> {
        self.folds.iter().map(Vec::as_slice)
    }

    /// Remove and return the front fold.
    pub fn pop_fold(&mut self) -> Result<Vec<usize>> {
        let fold = self
            .folds
            .pop_front()
            .ok_or_else(|| Error::FoldsExhausted {
                consumed: self.consumed,
                context: "pop from an empty schedule".into(),
            })?;
        self.consumed += 1;
        Ok(fold)
    }
}

/// Stratified schedule sized for a full simulation run.
pub fn stratified_kfold<R: Rng + ?Sized>(
    dataset: &Dataset,
    clients: usize,
    rounds: usize,
    rng: &mut R,
) -> Result<FoldSchedule> {
    if clients == 0 || rounds == 0 {
        return Err(Error::InvalidArgument(format!(
            "clients={clients}, rounds={rounds}"
        )));
    }
    FoldSchedule::stratified(dataset, fold_budget(clients, rounds), rng)
}

/// Read a CSV with header `f0,...,f{d-1},label`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let input_err = |message: String| Error::Input {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| input_err(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| input_err(e.to_string()))?
        .clone();
    if headers.iter().next_back().map(str::trim) != Some("label") {
        return Err(input_err("last header column must be `label`".into()));
    }
    let names: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
    let dim = names.len() - 1;
    if dim == 0 {
        return Err(input_err("no feature columns".into()));
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let cell_err = |column: &str, message: String| Error::Csv {
            path: path.to_path_buf(),
            row,
            line: row + 1,
            column: column.to_string(),
            message,
        };
        let record = record.map_err(|e| cell_err("-", e.to_string()))?;
        if record.len() != names.len() {
            return Err(cell_err(
                "-",
                format!("expected {} fields, found {}", names.len(), record.len()),
            ));
        }
        for (cell, name) in record.iter().zip(&names).take(dim) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| cell_err(name, format!("`{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(cell_err(name, format!("`{cell}` is not finite")));
            }
            values.push(v);
        }
        let raw = record[dim].trim();
        let label = match raw {
            "0" => 0,
            "1" => 1,
            other => match other.parse::<f64>() {
                Ok(0.0) => 0,
                Ok(1.0) => 1,
                _ => return Err(cell_err("label", format!("label `{raw}` not in {{0, 1}}"))),
            },
        };
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(input_err("no data rows".into()));
    }
    let features =
        Array2::from_shape_vec((labels.len(), dim), values).expect("row lengths checked");
    Dataset::new(features, labels)
}

/// Write a dataset in the same format [`load_csv`] reads. Floats are written
/// in shortest round-trip form.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    let to_err = |e: csv::Error| Error::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    writer.write_record(&header).map_err(to_err)?;
    for (row, &label) in dataset.features.rows().into_iter().zip(&dataset.labels) {
        let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        fields.push(label.to_string());
        writer.write_record(&fields).map_err(to_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
