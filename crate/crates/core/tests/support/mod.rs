//! Reference implementations used as oracles by the integration tests. They
//! share no code with the library beyond data types and the random source.

#![allow(dead_code)]

use std::collections::BTreeSet;

use islab::{LayerPrior, Rng, StructureMask, VariationalLayer};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};

fn softplus(r: f64) -> f64 {
    if r > 30.0 {
        r
    } else {
        r.exp().ln_1p()
    }
}

fn sigmoid(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

fn ln_normal(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Monte Carlo estimate of `KL(q || p)` for one layer: mean and standard
/// error of `log q(gamma, w) - log p(gamma, w)` over `n` joint draws from q.
/// Under `gamma = 0` both densities put the same point mass at zero, so only
/// the Bernoulli factors remain.
pub fn mc_kl(
    layer: &VariationalLayer<f64>,
    prior: &LayerPrior,
    n: usize,
    rng: &mut Rng,
) -> (f64, f64) {
    let (tau, psi) = (prior.prior_std, prior.psi);
    let edges: Vec<(f64, f64, f64)> = layer
        .mu
        .iter()
        .zip(&layer.rho)
        .zip(&layer.lambda)
        .map(|((&m, &r), &l)| (m, softplus(r), sigmoid(l)))
        .collect();
    let biases: Vec<(f64, f64)> = layer
        .bias_mu
        .iter()
        .zip(&layer.bias_rho)
        .map(|(&m, &r)| (m, softplus(r)))
        .collect();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let mut d = 0.0;
        for &(m, s, a) in &edges {
            if rng.bernoulli(a) {
                let w = m + s * rng.normal();
                d += a.ln() + ln_normal(w, m, s) - psi.ln() - ln_normal(w, 0.0, tau);
            } else {
                d += (1.0 - a).ln() - (1.0 - psi).ln();
            }
        }
        for &(m, s) in &biases {
            let b = m + s * rng.normal();
            d += ln_normal(b, m, s) - ln_normal(b, 0.0, tau);
        }
        sum += d;
        sum_sq += d * d;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt())
}

/// Pre-activations of `layer` on input `a` with explicitly sampled
/// structure and weights: `b + sum_k gamma_k w_k a_k`.
pub fn weight_space_sample(layer: &VariationalLayer<f64>, a: &[f64], rng: &mut Rng) -> Vec<f64> {
    (0..layer.mu.nrows())
        .map(|p| {
            let bs = softplus(layer.bias_rho[p]);
            let mut z = layer.bias_mu[p] + bs * rng.normal();
            for (k, &ak) in a.iter().enumerate() {
                let alpha = sigmoid(layer.lambda[[p, k]]);
                if rng.bernoulli(alpha) {
                    let w = layer.mu[[p, k]] + softplus(layer.rho[[p, k]]) * rng.normal();
                    z += w * ak;
                }
            }
            z
        })
        .collect()
}

/// Running mean and variance of a stream of vectors.
pub struct Moments {
    n: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; dim],
            sum_sq: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, v: &[f64]) {
        self.n += 1;
        for (i, &x) in v.iter().enumerate() {
            self.sum[i] += x;
            self.sum_sq[i] += x * x;
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    pub fn var(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| (q - s * s / n) / (n - 1.0))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.n
    }
}

/// An edge `(layer, target unit, input column)`.
pub type Edge = (usize, usize, usize);

/// Every complete path from a covariate entry to an output node, found by
/// depth-first search over the included edges. Each path starts at a
/// covariate-origin edge; its depth is `n_layers - layer of that edge`.
pub fn enumerate_paths(mask: &StructureMask) -> Vec<Vec<Edge>> {
    let n_layers = mask.layers.len();
    let mut out = Vec::new();
    fn extend(mask: &StructureMask, path: &mut Vec<Edge>, out: &mut Vec<Vec<Edge>>) {
        let &(j, p, _) = path.last().expect("non-empty path");
        if j + 1 == mask.layers.len() {
            out.push(path.clone());
            return;
        }
        let next = &mask.layers[j + 1];
        for q in 0..next.n_out() {
            // hidden unit p of layer j feeds input column p of layer j + 1
            if next.get(q, p) {
                path.push((j + 1, q, p));
                extend(mask, path, out);
                path.pop();
            }
        }
    }
    for j in 0..n_layers {
        let lm = &mask.layers[j];
        for p in 0..lm.n_out() {
            for k in lm.hidden_inputs()..lm.n_in() {
                if lm.get(p, k) {
                    let mut path = vec![(j, p, k)];
                    extend(mask, &mut path, &mut out);
                }
            }
        }
    }
    out
}

/// Edges on at least one complete path and per-covariate depth sets.
pub fn path_oracle(mask: &StructureMask) -> (BTreeSet<Edge>, Vec<BTreeSet<usize>>) {
    let n_layers = mask.layers.len();
    let v = mask.layers[0].n_in() - mask.layers[0].hidden_inputs();
    let mut edges = BTreeSet::new();
    let mut depths = vec![BTreeSet::new(); v];
    for path in enumerate_paths(mask) {
        let (j, _, k) = path[0];
        let i = k - mask.layers[j].hidden_inputs();
        depths[i].insert(n_layers - j);
        edges.extend(path);
    }
    (edges, depths)
}

/// Ordinary least squares of `y` on `[1, x]`; returns `(intercept, slopes)`.
pub fn least_squares(x: &Array2<f64>, y: &Array1<f64>) -> Option<(f64, Vec<f64>)> {
    let (n, v) = x.dim();
    if n < v + 1 {
        return None;
    }
    let design = DMatrix::from_fn(n, v + 1, |r, c| if c == 0 { 1.0 } else { x[[r, c - 1]] });
    let target = DVector::from_iterator(n, y.iter().copied());
    let xtx = design.transpose() * &design;
    let xty = design.transpose() * target;
    let beta = xtx.cholesky()?.solve(&xty);
    Some((beta[0], beta.iter().skip(1).copied().collect()))
}

/// Local surrogate fit: least squares of `f` on `n` points drawn uniformly
/// from the cube of half-width `eps` around `x`. The design is centered on
/// `x` for conditioning; the returned intercept is at the origin.
pub fn lime(
    f: impl Fn(&Array2<f64>) -> Array1<f64>,
    x: &[f64],
    eps: f64,
    n: usize,
    rng: &mut Rng,
) -> Option<(f64, Vec<f64>)> {
    let v = x.len();
    let offsets = Array2::from_shape_fn((n, v), |_| rng.uniform(-eps, eps));
    let pts = Array2::from_shape_fn((n, v), |(r, i)| x[i] + offsets[[r, i]]);
    let y = f(&pts);
    let (b0, beta) = least_squares(&offsets, &y)?;
    let intercept = b0 - beta.iter().zip(x).map(|(b, xi)| b * xi).sum::<f64>();
    Some((intercept, beta))
}
