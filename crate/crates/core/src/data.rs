//! Synthetic generators, CSV ingestion, min-max scaling and splitting.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Matrix, Vector};
use crate::rng::{Purpose, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Binary,
    Multiclass { n_classes: usize },
    Regression,
}

impl Task {
    pub fn n_classes(&self) -> Option<usize> {
        match *self {
            Task::Binary => Some(2),
            Task::Multiclass { n_classes } => Some(n_classes),
            Task::Regression => None,
        }
    }
}

/// Per-column affine map to `[0, 1]`, kept for inversion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Indices (in the unscaled data) of constant columns that were removed.
    pub dropped: Vec<usize>,
}

impl ScalingRecord {
    pub fn apply(&self, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        let keep = self.kept_columns(x.ncols())?;
        let mut out = x.select(Axis(1), &keep);
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (lo, hi) = (self.min[j], self.max[j]);
            col.mapv_inplace(|v| (v - lo) / (hi - lo));
        }
        Ok(out)
    }

    /// Maps scaled columns back to the original units (dropped columns stay dropped).
    pub fn inverse(&self, scaled: &Matrix<f64>) -> Result<Matrix<f64>> {
        if scaled.ncols() != self.min.len() {
            return Err(Error::dim("scaled columns", self.min.len(), scaled.ncols()));
        }
        let mut out = scaled.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (lo, hi) = (self.min[j], self.max[j]);
            col.mapv_inplace(|v| lo + v * (hi - lo));
        }
        Ok(out)
    }

    fn kept_columns(&self, n_cols: usize) -> Result<Vec<usize>> {
        let keep: Vec<usize> = (0..n_cols).filter(|j| !self.dropped.contains(j)).collect();
        if keep.len() != self.min.len() {
            return Err(Error::dim("scaled columns", self.min.len(), keep.len()));
        }
        Ok(keep)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix<f64>,
    pub y: Vector<f64>,
    pub task: Task,
    pub columns: Vec<String>,
    pub target: String,
    pub scaling: Option<ScalingRecord>,
    /// Latent linear predictor of synthetic data, before labeling.
    pub eta: Option<Vector<f64>>,
}

impl Dataset {
    pub fn new(x: Matrix<f64>, y: Vector<f64>, task: Task) -> Result<Self> {
        let columns = (1..=x.ncols()).map(|i| format!("x{i}")).collect();
        let ds = Self {
            x,
            y,
            task,
            columns,
            target: "y".into(),
            scaling: None,
            eta: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.y.len() != self.x.nrows() {
            return Err(Error::dim("targets", self.x.nrows(), self.y.len()));
        }
        if self.columns.len() != self.x.ncols() {
            return Err(Error::dim(
                "column names",
                self.x.ncols(),
                self.columns.len(),
            ));
        }
        if !math::all_finite(self.x.iter().copied()) || !math::all_finite(self.y.iter().copied()) {
            return Err(Error::Data(
                "dataset contains NaN or infinite values".into(),
            ));
        }
        if let Some(c) = self.task.n_classes() {
            if let Some(bad) = self
                .y
                .iter()
                .find(|&&v| v < 0.0 || v.fract() != 0.0 || v >= c as f64)
            {
                return Err(Error::Data(format!("label {bad} outside [0, {c})")));
            }
        }
        Ok(())
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), idx),
            y: self.y.select(Axis(0), idx),
            task: self.task,
            columns: self.columns.clone(),
            target: self.target.clone(),
            scaling: self.scaling.clone(),
            eta: self.eta.as_ref().map(|e| e.select(Axis(0), idx)),
        }
    }

    /// Writes covariates and target (last column) with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.columns.clone();
        header.push(self.target.clone());
        w.write_record(&header)?;
        let mut rec = Vec::with_capacity(header.len());
        for (row, y) in self.x.rows().into_iter().zip(self.y.iter()) {
            rec.clear();
            rec.extend(row.iter().map(|v| v.to_string()));
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Knobs for the synthetic generators beyond `(n, rho, seed)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GenOptions {
    /// Overwrite `x2` with zero before computing `eta`.
    pub zero_x2: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Synthetic {
    Linear,
    Nonlinear,
}

/// Covariate noise level of the generators.
pub const ETA_NOISE_STD: f64 = 0.01;

/// Four `U(-10, 10)` covariates with `x3 <- rho x1 + (1 - rho) x3`;
/// `eta = 100 + x1 + x2 + e`, `e ~ N(0, 0.01^2)`; `y = 1` iff `eta >= median(eta)`.
pub fn gen_linear(n: usize, rho: f64, seed: u64) -> Result<Dataset> {
    generate(Synthetic::Linear, n, rho, seed, GenOptions::default())
}

/// As [`gen_linear`] with `eta = 100 + x1 + x2 + x1 x2 + x1^2 + x2^2 + e`.
pub fn gen_nonlinear(n: usize, rho: f64, seed: u64) -> Result<Dataset> {
    generate(Synthetic::Nonlinear, n, rho, seed, GenOptions::default())
}

pub fn generate(
    kind: Synthetic,
    n: usize,
    rho: f64,
    seed: u64,
    opts: GenOptions,
) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 rows, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!(
            "rho must lie in [0, 1], got {rho}"
        )));
    }
    let mut cov_rng = Rng::substream(seed, Purpose::Data, 0);
    let mut noise_rng = Rng::substream(seed, Purpose::Data, 1);
    let mut x = Array2::<f64>::zeros((n, 4));
    let mut eta = Array1::<f64>::zeros(n);
    for i in 0..n {
        for j in 0..4 {
            x[[i, j]] = cov_rng.uniform(-10.0, 10.0);
        }
        x[[i, 2]] = rho * x[[i, 0]] + (1.0 - rho) * x[[i, 2]];
        if opts.zero_x2 {
            x[[i, 1]] = 0.0;
        }
        let (x1, x2) = (x[[i, 0]], x[[i, 1]]);
        let e = ETA_NOISE_STD * noise_rng.normal();
        eta[i] = match kind {
            Synthetic::Linear => 100.0 + x1 + x2 + e,
            Synthetic::Nonlinear => 100.0 + x1 + x2 + x1 * x2 + x1 * x1 + x2 * x2 + e,
        };
    }
    let med = math::median(eta.as_slice().expect("contiguous"));
    let y = eta.mapv(|v| if v >= med { 1.0 } else { 0.0 });
    let mut ds = Dataset::new(x, y, Task::Binary)?;
    ds.eta = Some(eta);
    Ok(ds)
}

/// Reads a headered CSV. Every column except `target_column` is a numeric
/// covariate. Classification targets that are non-negative integers are used
/// as-is; any other target strings are encoded in order of first appearance.
pub fn load_csv(path: &Path, target_column: &str, task: Task) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let target_idx = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| {
            Error::Data(format!(
                "{}: no column named `{target_column}`",
                path.display()
            ))
        })?;
    let columns: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    let v = columns.len();

    let mut values = Vec::new();
    let mut raw_targets = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::Data(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                r + 2,
                rec.len(),
                headers.len()
            )));
        }
        for (j, cell) in rec.iter().enumerate() {
            if j == target_idx {
                raw_targets.push(cell.trim().to_string());
                continue;
            }
            let value: f64 = cell.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}: row {}, column `{}`: non-numeric value `{cell}`",
                    path.display(),
                    r + 2,
                    &headers[j]
                ))
            })?;
            values.push(value);
        }
    }
    if raw_targets.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let n = raw_targets.len();
    let x = Array2::from_shape_vec((n, v), values).map_err(|e| Error::Data(e.to_string()))?;
    let y = encode_targets(&raw_targets, task)
        .map_err(|m| Error::Data(format!("{}: {m}", path.display())))?;
    let ds = Dataset {
        x,
        y,
        task,
        columns,
        target: target_column.to_string(),
        scaling: None,
        eta: None,
    };
    ds.validate()?;
    Ok(ds)
}

fn encode_targets(raw: &[String], task: Task) -> std::result::Result<Vector<f64>, String> {
    if task == Task::Regression {
        return raw
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| format!("non-numeric target `{s}`"))
            })
            .collect();
    }
    let as_int: Option<Vec<f64>> = raw
        .iter()
        .map(|s| s.parse::<u64>().ok().map(|v| v as f64))
        .collect();
    if let Some(v) = as_int {
        return Ok(Array1::from(v));
    }
    let mut seen: Vec<&str> = Vec::new();
    Ok(raw
        .iter()
        .map(|s| match seen.iter().position(|t| *t == s) {
            Some(k) => k as f64,
            None => {
                seen.push(s);
                (seen.len() - 1) as f64
            }
        })
        .collect())
}

/// What [`minmax_scale`] does with a constant column.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantColumn {
    #[default]
    Error,
    Drop,
}

/// Maps each covariate column affinely onto `[0, 1]`.
pub fn minmax_scale(ds: &Dataset, constant: ConstantColumn) -> Result<(Dataset, ScalingRecord)> {
    let mut record = ScalingRecord {
        min: Vec::new(),
        max: Vec::new(),
        dropped: Vec::new(),
    };
    for (j, col) in ds.x.columns().into_iter().enumerate() {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            match constant {
                ConstantColumn::Error => {
                    return Err(Error::Data(format!(
                        "column `{}` is constant and cannot be min-max scaled",
                        ds.columns[j]
                    )))
                }
                ConstantColumn::Drop => {
                    record.dropped.push(j);
                    continue;
                }
            }
        }
        record.min.push(lo);
        record.max.push(hi);
    }
    let x = record.apply(&ds.x)?;
    let columns = ds
        .columns
        .iter()
        .enumerate()
        .filter(|(j, _)| !record.dropped.contains(j))
        .map(|(_, c)| c.clone())
        .collect();
    let out = Dataset {
        x,
        y: ds.y.clone(),
        task: ds.task,
        columns,
        target: ds.target.clone(),
        scaling: Some(record.clone()),
        eta: ds.eta.clone(),
    };
    Ok((out, record))
}

/// Seeded shuffle into `n_train` training rows and the rest for testing.
pub fn split(ds: &Dataset, n_train: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_train >= ds.n() {
        return Err(Error::InvalidArgument(format!(
            "n_train = {n_train} must be below n = {}",
            ds.n()
        )));
    }
    let (train, test) = split_indices(ds.n(), n_train, seed);
    Ok((ds.subset(&train), ds.subset(&test)))
}

pub fn split_indices(n: usize, n_train: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::substream(seed, Purpose::Split, 0).shuffle(&mut idx);
    let test = idx.split_off(n_train);
    (idx, test)
}
