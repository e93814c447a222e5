//! Local and global explanations.
//!
//! With piecewise-linear activations and a fixed ReLU on/off pattern, the
//! linear predictor is exactly `beta_0 + sum_i beta_i x_i` around `x`. The
//! coefficients come either from propagating each covariate alone through
//! the active part of the network or from the input gradient; both give the
//! same numbers. Global explanations read the median probability model's
//! active paths.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::network::{FrozenNetwork, Layers, Mode, Network};
use crate::rng::{LayerStreams, Purpose};
use crate::scalar::Real;
use crate::structure::{
    active_paths, active_paths_to, extract_mpm, ActivePathGraph, EdgeLabels, EdgeOrigin,
    StructureMask,
};

/// `beta_0 + beta . x` decomposition of every output's linear predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalExplanation {
    /// `intercept[o]`.
    pub intercept: Array1<f64>,
    /// `coefficients[[o, i]]`; zero where `x_i = 0`.
    pub coefficients: Array2<f64>,
    /// Linear predictor of the full forward pass.
    pub linear_predictor: Array1<f64>,
    /// `zeroed[i]` is true when `x_i = 0`.
    pub zeroed: Vec<bool>,
}

impl LocalExplanation {
    /// `beta_0 + sum_i beta_i x_i` per output.
    pub fn reconstruct(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        &self.intercept + &self.coefficients.dot(&x)
    }
}

fn require_piecewise_linear<T: Real>(net: &FrozenNetwork<T>) -> Result<()> {
    if net.activation.is_piecewise_linear() {
        Ok(())
    } else {
        Err(Error::NotPiecewiseLinear(net.activation.name()))
    }
}

/// Active/inactive pattern of every hidden layer at `x` (`relu'(z)`).
fn activation_pattern<T: Real>(
    net: &FrozenNetwork<T>,
    x: ArrayView1<'_, T>,
) -> Result<(Vec<Vec<T>>, Array1<T>)> {
    let trace = net.forward_trace(x.insert_axis(Axis(0)))?;
    let pattern = trace
        .pre_acts
        .iter()
        .map(|z| z.row(0).iter().map(|&v| math::relu_grad(v)).collect())
        .collect();
    Ok((pattern, trace.logits.row(0).to_owned()))
}

/// Weight matrices restricted to the active-path edges of the frozen mask.
fn path_weights<T: Real>(net: &FrozenNetwork<T>) -> Vec<Matrix<T>> {
    let graph = active_paths(&net.mask);
    net.layers
        .iter()
        .zip(&graph.kept.layers)
        .map(|(l, kept)| {
            Matrix::from_shape_fn(l.weight.raw_dim(), |(p, k)| {
                if kept.get(p, k) {
                    l.weight[[p, k]]
                } else {
                    T::zero()
                }
            })
        })
        .collect()
}

/// Propagates covariate vector `u` through the network with the hidden
/// pattern frozen. Biases enter only when `with_bias` is set.
fn propagate<T: Real>(
    net: &FrozenNetwork<T>,
    weights: &[Matrix<T>],
    pattern: &[Vec<T>],
    u: &Array1<T>,
    with_bias: bool,
) -> Array1<T> {
    let mut h: Option<Array1<T>> = None;
    for (j, (w, layer)) in weights.iter().zip(&net.layers).enumerate() {
        let input = match &h {
            None => u.clone(),
            Some(prev) => ndarray::concatenate![Axis(0), prev.view(), u.view()],
        };
        let mut z = w.dot(&input);
        if with_bias {
            z += &layer.bias;
        }
        if j + 1 == weights.len() {
            return z;
        }
        for (zp, &d) in z.iter_mut().zip(&pattern[j]) {
            *zp *= d;
        }
        h = Some(z);
    }
    unreachable!("network has an output layer")
}

fn finish<T: Real>(
    x: ArrayView1<'_, T>,
    intercept: Array1<f64>,
    coefficients: Array2<f64>,
    logits: Array1<T>,
) -> LocalExplanation {
    LocalExplanation {
        intercept,
        coefficients,
        linear_predictor: logits.mapv(|v| v.as_f64()),
        zeroed: x.iter().map(|&v| v == T::zero()).collect(),
    }
}

/// Coefficients by propagating each `x_i e_i` alone through the active
/// paths and nodes; the intercept propagates the biases alone.
pub fn local_explain_empirical<T: Real>(
    net: &FrozenNetwork<T>,
    x: ArrayView1<'_, T>,
) -> Result<LocalExplanation> {
    require_piecewise_linear(net)?;
    let (pattern, logits) = activation_pattern(net, x)?;
    let weights = path_weights(net);
    let v = x.len();
    let c = logits.len();
    let mut coefficients = Array2::zeros((c, v));
    for i in 0..v {
        if x[i] == T::zero() {
            continue;
        }
        let mut u = Array1::zeros(v);
        u[i] = x[i];
        let contrib = propagate(net, &weights, &pattern, &u, false);
        for o in 0..c {
            coefficients[[o, i]] = (contrib[o] / x[i]).as_f64();
        }
    }
    // bias-only chains are not active paths but still shift the output
    let all: Vec<Matrix<T>> = net.layers.iter().map(|l| l.weight.clone()).collect();
    let intercept = propagate(net, &all, &pattern, &Array1::zeros(v), true).mapv(|b| b.as_f64());
    Ok(finish(x, intercept, coefficients, logits))
}

/// Coefficients as the input gradient of the linear predictor; the
/// intercept is the residual `zeta(x) - beta . x`.
pub fn local_explain_gradient<T: Real>(
    net: &FrozenNetwork<T>,
    x: ArrayView1<'_, T>,
) -> Result<LocalExplanation> {
    require_piecewise_linear(net)?;
    let (pattern, logits) = activation_pattern(net, x)?;
    let v = x.len();
    let c = logits.len();
    let n = net.layers.len();
    let mut coefficients = Array2::zeros((c, v));
    for o in 0..c {
        let mut g: Array1<T> = Array1::zeros(c);
        g[o] = T::one();
        let mut grad_x: Array1<T> = Array1::zeros(v);
        for j in (0..n).rev() {
            let layer = &net.layers[j];
            let back = layer.weight.t().dot(&g);
            let hid = layer.hidden_inputs();
            grad_x += &back.slice(ndarray::s![hid..]);
            if j == 0 {
                break;
            }
            g = back.slice(ndarray::s![..hid]).to_owned();
            for (gp, &d) in g.iter_mut().zip(&pattern[j - 1]) {
                *gp *= d;
            }
        }
        for i in 0..v {
            if x[i] != T::zero() {
                coefficients[[o, i]] = grad_x[i].as_f64();
            }
        }
    }
    let xf = x.mapv(|v| v.as_f64());
    let intercept = logits.mapv(|v| v.as_f64()) - coefficients.dot(&xf);
    Ok(finish(x, intercept, coefficients, logits))
}

/// Posterior mean and central 95% interval of a scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub samples: Vec<f64>,
}

impl Interval {
    fn from_samples(samples: Vec<f64>) -> Self {
        Self {
            mean: math::shifted_mean(samples.iter().copied()).expect("at least one sample"),
            lower: math::quantile(&samples, 0.025),
            upper: math::quantile(&samples, 0.975),
            samples,
        }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputExplanation {
    pub output: usize,
    pub intercept: Interval,
    /// One entry per covariate.
    pub coefficients: Vec<Interval>,
    pub linear_predictor: Interval,
    /// Head-transformed prediction (probability or mean) for this output.
    pub prediction: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub n_samples: usize,
    pub x: Vec<f64>,
    pub covariates: Vec<String>,
    /// Covariates whose coefficient is reported as zero because `x_i = 0`.
    pub zeroed: Vec<bool>,
    pub outputs: Vec<OutputExplanation>,
}

impl ExplanationReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Largest `|beta_0 + beta . x - zeta(x)|` over outputs and samples.
    pub fn max_reconstruction_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for o in &self.outputs {
            for s in 0..self.n_samples {
                let fit = o.intercept.samples[s]
                    + o.coefficients
                        .iter()
                        .zip(&self.x)
                        .map(|(b, x)| b.samples[s] * x)
                        .sum::<f64>();
                worst = worst.max((fit - o.linear_predictor.samples[s]).abs());
            }
        }
        worst
    }
}

/// The structure explanations condition on: the MPM for variational models,
/// the thresholded weights for the L1 baseline.
pub fn explanation_mask<T: Real>(net: &Network<T>) -> Result<StructureMask> {
    match net.spec.mode {
        Mode::Variational => extract_mpm(net),
        Mode::DeterministicL1 { .. } => Ok(net.sparse_mask()),
    }
}

/// Gradient explanations of `x` under `n` weight draws on the MPM
/// structure, summarized by posterior means and 95% intervals.
pub fn explain_with_uncertainty<T: Real>(
    net: &Network<T>,
    x: ArrayView1<'_, T>,
    n: usize,
    seed: u64,
    covariates: &[String],
) -> Result<ExplanationReport> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "explanations need at least one sample".into(),
        ));
    }
    if x.len() != net.spec.n_covariates {
        return Err(Error::dim("covariates", net.spec.n_covariates, x.len()));
    }
    let mask = explanation_mask(net)?;
    let mut streams = LayerStreams::new(seed, Purpose::Explain, net.n_layers());
    let c = net.spec.n_outputs;
    let v = x.len();
    let mut intercepts = vec![Vec::with_capacity(n); c];
    let mut coefs = vec![vec![Vec::with_capacity(n); v]; c];
    let mut zetas = vec![Vec::with_capacity(n); c];
    let mut preds = vec![Vec::with_capacity(n); c];
    let mut zeroed = Vec::new();
    for _ in 0..n {
        let frozen = match net.layers {
            Layers::Variational(_) => net.freeze(&mask, Some(&mut streams))?,
            Layers::Dense(_) => net.freeze(&mask, None)?,
        };
        let e = local_explain_gradient(&frozen, x)?;
        let logits = e.linear_predictor.mapv(T::of).insert_axis(Axis(0));
        let params = frozen.head.transform(&logits);
        for o in 0..c {
            intercepts[o].push(e.intercept[o]);
            zetas[o].push(e.linear_predictor[o]);
            preds[o].push(params[[0, o]].as_f64());
            for i in 0..v {
                coefs[o][i].push(e.coefficients[[o, i]]);
            }
        }
        zeroed = e.zeroed;
    }
    let outputs = (0..c)
        .map(|o| OutputExplanation {
            output: o,
            intercept: Interval::from_samples(std::mem::take(&mut intercepts[o])),
            coefficients: std::mem::take(&mut coefs[o])
                .into_iter()
                .map(Interval::from_samples)
                .collect(),
            linear_predictor: Interval::from_samples(std::mem::take(&mut zetas[o])),
            prediction: Interval::from_samples(std::mem::take(&mut preds[o])),
        })
        .collect();
    let names = if covariates.len() == v {
        covariates.to_vec()
    } else {
        (1..=v).map(|i| format!("x{i}")).collect()
    };
    Ok(ExplanationReport {
        n_samples: n,
        x: x.iter().map(|v| v.as_f64()).collect(),
        covariates: names,
        zeroed,
        outputs,
    })
}

/// MPM active-path graph plus per-output covariate maps.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalExplanation {
    pub graph: ActivePathGraph,
    pub labels: EdgeLabels,
    /// `maps[o][[l, i]]`: covariate `i` enters layer `l` (0 = input layer) on
    /// an active path to output `o`.
    pub maps: Vec<Array2<bool>>,
}

impl GlobalExplanation {
    /// Union over entry layers: covariates with any active path to `o`.
    pub fn covariates_for(&self, o: usize) -> Vec<bool> {
        self.maps[o]
            .columns()
            .into_iter()
            .map(|c| c.iter().any(|&b| b))
            .collect()
    }

    pub fn to_dot(&self) -> String {
        crate::structure::to_dot(&self.graph, &self.labels)
    }

    pub fn to_json(&self) -> serde_json::Value {
        crate::structure::to_json(&self.graph, &self.labels)
    }

    /// One row per (output, entry layer) plus an `all` row per output; one
    /// 0/1 column per covariate, in covariate order.
    pub fn write_maps_csv(&self, path: &Path, covariates: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let v = self.maps.first().map_or(0, |m| m.ncols());
        let names: Vec<String> = if covariates.len() == v {
            covariates.to_vec()
        } else {
            (1..=v).map(|i| format!("x{i}")).collect()
        };
        let mut header = vec!["output".to_string(), "layer".to_string()];
        header.extend(names);
        w.write_record(&header)?;
        let bit = |b: bool| if b { "1" } else { "0" }.to_string();
        for (o, m) in self.maps.iter().enumerate() {
            for (l, row) in m.rows().into_iter().enumerate() {
                let mut rec = vec![o.to_string(), l.to_string()];
                rec.extend(row.iter().map(|&b| bit(b)));
                w.write_record(&rec)?;
            }
            let mut rec = vec![o.to_string(), "all".to_string()];
            rec.extend(self.covariates_for(o).into_iter().map(bit));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Per-output covariate maps of a structure mask.
pub fn covariate_maps(mask: &StructureMask) -> Vec<Array2<bool>> {
    let v = mask.n_covariates();
    let n_layers = mask.n_layers();
    (0..mask.n_outputs())
        .map(|o| {
            let g = active_paths_to(mask, &[o]);
            let mut m = Array2::from_elem((n_layers, v), false);
            for (l, lm) in g.kept.layers.iter().enumerate() {
                for p in 0..lm.n_out() {
                    for k in 0..lm.n_in() {
                        if let (true, EdgeOrigin::Covariate(i)) = (lm.get(p, k), lm.origin(k)) {
                            m[[l, i]] = true;
                        }
                    }
                }
            }
            m
        })
        .collect()
}

pub fn global_explain<T: Real>(net: &Network<T>) -> Result<GlobalExplanation> {
    let mask = explanation_mask(net)?;
    Ok(GlobalExplanation {
        graph: active_paths(&mask),
        labels: EdgeLabels::from_network(net),
        maps: covariate_maps(&mask),
    })
}
