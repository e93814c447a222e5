//! Evaluation metrics: accuracy, ECE, NLL, RMSE, Pearson correlation and
//! pinball loss, plus a driver that evaluates a trained network.

use std::fmt;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::network::{class_index, Head, Likelihood, Network, PredictVariant};
use crate::rng::{Purpose, Rng};
use crate::scalar::Real;
use crate::train::argmax;

pub const DEFAULT_ECE_BINS: usize = 10;

/// Quantile levels 0.05, 0.15, ..., 0.95.
pub fn default_pinball_taus() -> Vec<f64> {
    (0..10).map(|i| 0.05 + 0.1 * i as f64).collect()
}

fn check_len(context: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim(context, a, b));
    }
    if a == 0 {
        return Err(Error::InvalidArgument(format!("{context}: empty input")));
    }
    Ok(())
}

/// Predicted class and its probability. A single column is read as
/// `P(y = 1)`.
fn prediction(row: ArrayView1<'_, f64>) -> (usize, f64) {
    if row.len() == 1 {
        let p = row[0];
        if p > 0.5 {
            (1, p)
        } else {
            (0, 1.0 - p)
        }
    } else {
        let k = argmax(row.iter().copied());
        (k, row[k])
    }
}

fn label(y: f64, n_cols: usize) -> Result<usize> {
    class_index(y, n_cols.max(2))
}

pub fn accuracy(probs: ArrayView2<'_, f64>, labels: ArrayView1<'_, f64>) -> Result<f64> {
    check_len("accuracy labels", probs.nrows(), labels.len())?;
    let mut correct = 0usize;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        correct += usize::from(prediction(row).0 == label(y, row.len())?);
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Expected calibration error over `n_bins` equal-width confidence bins.
/// Bin `b` covers `(b/n_bins, (b+1)/n_bins]`, the first bin also holds 0.
pub fn ece(probs: ArrayView2<'_, f64>, labels: ArrayView1<'_, f64>, n_bins: usize) -> Result<f64> {
    if n_bins == 0 {
        return Err(Error::InvalidArgument("ece needs at least one bin".into()));
    }
    check_len("ece labels", probs.nrows(), labels.len())?;
    let mut count = vec![0usize; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        let (k, c) = prediction(row);
        let b = ((c * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
        count[b] += 1;
        hits[b] += usize::from(k == label(y, row.len())?);
        conf[b] += c;
    }
    let n = labels.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] as f64 / m - conf[b] / m).abs()
        })
        .sum())
}

/// Mean negative log-likelihood of `labels` under per-row likelihood
/// parameters (probabilities or Gaussian means).
pub fn nll(params: ArrayView2<'_, f64>, labels: ArrayView1<'_, f64>, head: &Head) -> Result<f64> {
    check_len("nll labels", params.nrows(), labels.len())?;
    let mut total = 0.0;
    for (row, &y) in params.rows().into_iter().zip(labels) {
        total -= head.log_likelihood(row, y)?;
    }
    Ok(total / labels.len() as f64)
}

pub fn rmse(preds: ArrayView1<'_, f64>, targets: ArrayView1<'_, f64>) -> Result<f64> {
    check_len("rmse targets", preds.len(), targets.len())?;
    let sq: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    Ok((sq / preds.len() as f64).sqrt())
}

pub fn pearson(preds: ArrayView1<'_, f64>, targets: ArrayView1<'_, f64>) -> Result<f64> {
    check_len("pearson targets", preds.len(), targets.len())?;
    if preds.len() < 2 {
        return Err(Error::InvalidArgument(
            "pearson needs at least two points".into(),
        ));
    }
    let mp = preds.mean().expect("non-empty");
    let mt = targets.mean().expect("non-empty");
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        let (a, b) = (p - mp, t - mt);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("pearson: zero variance".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Mean pinball loss. `quantiles[[i, t]]` is the predicted `taus[t]`
/// quantile for point `i`.
pub fn pinball(
    quantiles: ArrayView2<'_, f64>,
    targets: ArrayView1<'_, f64>,
    taus: &[f64],
) -> Result<f64> {
    check_len("pinball targets", quantiles.nrows(), targets.len())?;
    check_len("pinball levels", quantiles.ncols(), taus.len())?;
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "quantile level {t} outside (0, 1)"
        )));
    }
    let mut total = 0.0;
    for (row, &y) in quantiles.rows().into_iter().zip(targets) {
        for (&q, &tau) in row.iter().zip(taus) {
            let d = y - q;
            total += if d >= 0.0 { tau * d } else { (tau - 1.0) * d };
        }
    }
    Ok(total / (targets.len() * taus.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Sparse,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Sparse => "sparse",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: String,
    pub value: f64,
    pub variant: Variant,
    pub n_mc_samples: usize,
}

/// Affine map from the training scale of a regression target back to its
/// original scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub mean: f64,
    pub std: f64,
}

impl TargetScale {
    pub const IDENTITY: TargetScale = TargetScale {
        mean: 0.0,
        std: 1.0,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub n_samples: usize,
    pub seed: u64,
    pub ece_bins: usize,
    pub pinball_taus: Vec<f64>,
    /// Regression only: metrics are reported on the original target scale.
    pub target_scale: TargetScale,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_samples: 100,
            seed: 0,
            ece_bins: DEFAULT_ECE_BINS,
            pinball_taus: default_pinball_taus(),
            target_scale: TargetScale::IDENTITY,
        }
    }
}

/// Task metrics of `net` on `(x, y)` with MC-averaged predictions. `y` is on
/// the original scale.
pub fn evaluate<T: Real>(
    net: &Network<T>,
    x: ArrayView2<'_, T>,
    y: ArrayView1<'_, f64>,
    variant: &PredictVariant,
    opts: &EvalOptions,
) -> Result<Vec<(String, f64)>> {
    let pred = net.predict(x, opts.n_samples, opts.seed, variant)?;
    let head = net.head();
    let mean = pred.mean().mapv(|v| v.as_f64());
    let mut out = Vec::new();
    match head.likelihood {
        Likelihood::Bernoulli | Likelihood::Categorical => {
            out.push(("acc".into(), accuracy(mean.view(), y)?));
            out.push(("ece".into(), ece(mean.view(), y, opts.ece_bins)?));
            out.push(("nll".into(), nll(mean.view(), y, &head)?));
        }
        Likelihood::Gaussian => {
            let TargetScale {
                mean: shift,
                std: scale,
            } = opts.target_scale;
            if !(scale > 0.0) {
                return Err(Error::InvalidArgument(format!("target scale {scale}")));
            }
            let m = mean.column(0).mapv(|v| shift + scale * v);
            out.push(("rmse".into(), rmse(m.view(), y)?));
            out.push(("corr".into(), pearson(m.view(), y)?));
            // Gaussian mixture over the MC draws, each N(m_s, phi) on the training scale.
            let phi = head.phi;
            let mut nll_sum = 0.0;
            for (i, &yi) in y.iter().enumerate() {
                let z = (yi - shift) / scale;
                let lls: Vec<f64> = pred
                    .samples
                    .iter()
                    .map(|s| {
                        -0.5 * (2.0 * std::f64::consts::PI * phi).ln()
                            - (z - s[[i, 0]].as_f64()).powi(2) / (2.0 * phi)
                    })
                    .collect();
                nll_sum -= math::log_mean_exp(&lls) - scale.ln();
            }
            out.push(("nll".into(), nll_sum / y.len() as f64));
            let q = predictive_quantiles(&pred.samples, phi, &opts.pinball_taus, opts.seed)?
                .mapv(|v| shift + scale * v);
            out.push(("pinball".into(), pinball(q.view(), y, &opts.pinball_taus)?));
        }
    }
    Ok(out)
}

/// Empirical quantiles of posterior predictive draws `y_s ~ N(m_s, phi)`.
fn predictive_quantiles<T: Real>(
    samples: &[Array2<T>],
    phi: f64,
    taus: &[f64],
    seed: u64,
) -> Result<Array2<f64>> {
    let n = samples[0].nrows();
    let mut rng = Rng::substream(seed, Purpose::Predict, u32::MAX);
    let sd = phi.sqrt();
    let mut out = Array2::zeros((n, taus.len()));
    let mut draws = Vec::with_capacity(samples.len());
    for i in 0..n {
        draws.clear();
        for s in samples {
            draws.push(math::gauss_sample(&mut rng, s[[i, 0]].as_f64(), sd)?);
        }
        for (t, &tau) in taus.iter().enumerate() {
            out[[i, t]] = math::quantile(&draws, tau);
        }
    }
    Ok(out)
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub model: String,
    pub variant: String,
    pub metric: String,
    pub value: String,
    pub seed: String,
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Shortest representation that round-trips, so equal values print equal
/// bytes.
pub fn format_value(v: f64) -> String {
    format!("{v}")
}

/// `median (min, max)` as printed in result tables.
pub fn aggregate(values: &[f64]) -> Option<String> {
    if values.is_empty() {
        return None;
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let med = math::median(values);
    Some(format!("{} ({}, {})", short(med), short(lo), short(hi)))
}

fn short(v: f64) -> String {
    if v == v.round() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}
