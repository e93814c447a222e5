//! A single input-skip layer.
//!
//! Columns `[0, hidden_inputs)` of every weight matrix read the previous
//! hidden layer; columns `[hidden_inputs, n_in)` read the raw covariates.
//! Each weight `w[p, k]` carries a Gaussian slab `N(mu, sigma^2)` gated by an
//! inclusion indicator with probability `alpha = sigmoid(lambda)`. Biases are
//! Gaussian and always included.

use ndarray::{Array1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, sigmoid, softplus, softplus_inv, Matrix, Vector};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::structure::LayerMask;

/// Bounds applied to `alpha` wherever a logarithm of it is taken.
pub const ALPHA_FLOOR: f64 = 1e-8;

/// Spike-and-slab prior: slab `N(0, prior_std^2)`, inclusion probability `psi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPrior {
    pub prior_std: f64,
    pub psi: f64,
}

impl LayerPrior {
    pub fn new(prior_std: f64, psi: f64) -> Result<Self> {
        let prior = Self { prior_std, psi };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prior_std > 0.0 && self.prior_std.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "prior_std must be positive, got {}",
                self.prior_std
            )));
        }
        if !(self.psi > 0.0 && self.psi < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "psi must lie in (0, 1), got {}",
                self.psi
            )));
        }
        Ok(())
    }
}

/// Initialization ranges. `lambda_*` are the logit ranges for edges leaving
/// hidden nodes and edges leaving covariates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerInit {
    pub sigma: f64,
    pub lambda_hidden: (f64, f64),
    pub lambda_covariate: (f64, f64),
}

impl Default for LayerInit {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            lambda_hidden: (-10.0, -7.0),
            lambda_covariate: (5.0, 5.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalLayer<T> {
    pub mu: Matrix<T>,
    pub rho: Matrix<T>,
    pub lambda: Matrix<T>,
    pub bias_mu: Vector<T>,
    pub bias_rho: Vector<T>,
    hidden_inputs: usize,
}

/// Derived quantities of the variational parameters, computed once per step.
#[derive(Clone, Debug)]
pub struct Moments<T> {
    pub alpha: Matrix<T>,
    pub sigma: Matrix<T>,
    /// `E[gamma w] = alpha mu`
    pub mean_w: Matrix<T>,
    /// `Var[gamma w] = alpha (sigma^2 + mu^2) - alpha^2 mu^2`
    pub var_w: Matrix<T>,
    pub bias_sigma: Vector<T>,
}

/// State kept from a sampled forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct LrtCache<T> {
    pub input: Matrix<T>,
    pub eps: Matrix<T>,
    pub mean: Matrix<T>,
    pub std: Matrix<T>,
    pub moments: Moments<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad<T> {
    pub mu: Matrix<T>,
    pub rho: Matrix<T>,
    pub lambda: Matrix<T>,
    pub bias_mu: Vector<T>,
    pub bias_rho: Vector<T>,
}

impl<T: Real> LayerGrad<T> {
    pub fn zeros(n_out: usize, n_in: usize) -> Self {
        Self {
            mu: Matrix::zeros((n_out, n_in)),
            rho: Matrix::zeros((n_out, n_in)),
            lambda: Matrix::zeros((n_out, n_in)),
            bias_mu: Vector::zeros(n_out),
            bias_rho: Vector::zeros(n_out),
        }
    }

    pub fn blocks(&self) -> [&[T]; 5] {
        [
            self.mu.as_slice().expect("standard layout"),
            self.rho.as_slice().expect("standard layout"),
            self.lambda.as_slice().expect("standard layout"),
            self.bias_mu.as_slice().expect("standard layout"),
            self.bias_rho.as_slice().expect("standard layout"),
        ]
    }
}

impl<T: Real> VariationalLayer<T> {
    /// Builds a layer directly from parameters.
    pub fn from_parts(
        mu: Matrix<T>,
        rho: Matrix<T>,
        lambda: Matrix<T>,
        bias_mu: Vector<T>,
        bias_rho: Vector<T>,
        hidden_inputs: usize,
    ) -> Result<Self> {
        let (out, inp) = mu.dim();
        if rho.dim() != (out, inp) {
            return Err(Error::dim("rho rows*cols", out * inp, rho.len()));
        }
        if lambda.dim() != (out, inp) {
            return Err(Error::dim("lambda rows*cols", out * inp, lambda.len()));
        }
        if bias_mu.len() != out {
            return Err(Error::dim("bias_mu", out, bias_mu.len()));
        }
        if bias_rho.len() != out {
            return Err(Error::dim("bias_rho", out, bias_rho.len()));
        }
        if hidden_inputs > inp {
            return Err(Error::dim("hidden_inputs", inp, hidden_inputs));
        }
        Ok(Self {
            mu: mu.as_standard_layout().into_owned(),
            rho: rho.as_standard_layout().into_owned(),
            lambda: lambda.as_standard_layout().into_owned(),
            bias_mu,
            bias_rho,
            hidden_inputs,
        })
    }

    /// Random initialization: `mu ~ U(-1/sqrt(n_in), 1/sqrt(n_in))`,
    /// `sigma = init.sigma`, `lambda` uniform in the range for the edge's origin.
    pub fn init(
        n_out: usize,
        hidden_inputs: usize,
        n_covariates: usize,
        init: &LayerInit,
        rng: &mut Rng,
    ) -> Self {
        let n_in = hidden_inputs + n_covariates;
        let bound = 1.0 / (n_in.max(1) as f64).sqrt();
        let rho0 = T::of(softplus_inv(init.sigma));
        let mu = Matrix::from_shape_fn((n_out, n_in), |_| T::of(rng.uniform(-bound, bound)));
        let lambda = Matrix::from_shape_fn((n_out, n_in), |(_, k)| {
            let (lo, hi) = if k < hidden_inputs {
                init.lambda_hidden
            } else {
                init.lambda_covariate
            };
            T::of(rng.uniform(lo, hi))
        });
        let bias_mu = Vector::from_shape_fn(n_out, |_| T::of(rng.uniform(-bound, bound)));
        Self {
            mu,
            rho: Matrix::from_elem((n_out, n_in), rho0),
            lambda,
            bias_mu,
            bias_rho: Vector::from_elem(n_out, rho0),
            hidden_inputs,
        }
    }

    pub fn n_out(&self) -> usize {
        self.mu.nrows()
    }

    pub fn n_in(&self) -> usize {
        self.mu.ncols()
    }

    pub fn hidden_inputs(&self) -> usize {
        self.hidden_inputs
    }

    pub fn n_covariates(&self) -> usize {
        self.n_in() - self.hidden_inputs
    }

    pub fn alpha(&self) -> Matrix<T> {
        self.lambda.mapv(sigmoid)
    }

    pub fn sigma(&self) -> Matrix<T> {
        self.rho.mapv(softplus)
    }

    pub fn bias_sigma(&self) -> Vector<T> {
        self.bias_rho.mapv(softplus)
    }

    pub fn moments(&self) -> Moments<T> {
        let alpha = self.alpha();
        let sigma = self.sigma();
        let mean_w = &alpha * &self.mu;
        let mut var_w = Matrix::zeros(self.mu.raw_dim());
        Zip::from(&mut var_w)
            .and(&alpha)
            .and(&sigma)
            .and(&self.mu)
            .for_each(|v, &a, &s, &m| {
                // alpha (sigma^2 + mu^2) - alpha^2 mu^2, factored to stay >= 0
                *v = a * (s * s + (T::one() - a) * m * m);
            });
        Moments {
            alpha,
            sigma,
            mean_w,
            var_w,
            bias_sigma: self.bias_sigma(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        let ok = math::all_finite(self.mu.iter().copied())
            && math::all_finite(self.rho.iter().copied())
            && math::all_finite(self.lambda.iter().copied())
            && math::all_finite(self.bias_mu.iter().copied())
            && math::all_finite(self.bias_rho.iter().copied());
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite("variational layer parameters".into()))
        }
    }

    fn check_input(&self, input: &ArrayView2<'_, T>) -> Result<()> {
        if input.ncols() != self.n_in() {
            return Err(Error::dim("layer input width", self.n_in(), input.ncols()));
        }
        Ok(())
    }

    /// Samples pre-activations `z = m + s * eps` with
    /// `m = b_mu + A E[gamma w]^T` and `s^2 = b_sigma^2 + A^2 Var[gamma w]^T`.
    /// One independent draw per (row, unit).
    pub fn lrt_forward(
        &self,
        input: ArrayView2<'_, T>,
        rng: &mut Rng,
    ) -> Result<(Matrix<T>, LrtCache<T>)> {
        let eps = Matrix::from_shape_fn((input.nrows(), self.n_out()), |_| T::of(rng.normal()));
        self.lrt_forward_with_noise(input, eps)
    }

    /// As [`Self::lrt_forward`] with caller-supplied standard-normal noise.
    pub fn lrt_forward_with_noise(
        &self,
        input: ArrayView2<'_, T>,
        eps: Matrix<T>,
    ) -> Result<(Matrix<T>, LrtCache<T>)> {
        self.check_input(&input)?;
        self.check_finite()?;
        if eps.dim() != (input.nrows(), self.n_out()) {
            return Err(Error::dim(
                "noise rows*cols",
                input.nrows() * self.n_out(),
                eps.len(),
            ));
        }
        let moments = self.moments();
        self.lrt_with_moments(input, eps, moments)
    }

    pub(crate) fn lrt_with_moments(
        &self,
        input: ArrayView2<'_, T>,
        eps: Matrix<T>,
        moments: Moments<T>,
    ) -> Result<(Matrix<T>, LrtCache<T>)> {
        let mut mean = input.dot(&moments.mean_w.t());
        mean += &self.bias_mu;
        let sq = input.mapv(|a| a * a);
        let mut var = sq.dot(&moments.var_w.t());
        let bias_var = moments.bias_sigma.mapv(|s| s * s);
        var += &bias_var;
        let std = var.mapv(|v| v.max(T::zero()).sqrt());
        let mut z = Matrix::zeros(mean.raw_dim());
        Zip::from(&mut z)
            .and(&mean)
            .and(&std)
            .and(&eps)
            .for_each(|z, &m, &s, &e| *z = m + s * e);
        Ok((
            z,
            LrtCache {
                input: input.to_owned(),
                eps,
                mean,
                std,
                moments,
            },
        ))
    }

    /// Gradients of `sum(grad_pre * z)` with respect to every parameter, and
    /// with respect to the layer input when `need_input_grad` is set.
    pub fn layer_backward(
        &self,
        cache: &LrtCache<T>,
        grad_pre: ArrayView2<'_, T>,
        need_input_grad: bool,
    ) -> Result<(LayerGrad<T>, Option<Matrix<T>>)> {
        if grad_pre.dim() != cache.mean.dim() {
            return Err(Error::dim(
                "upstream gradient",
                cache.mean.len(),
                grad_pre.len(),
            ));
        }
        let two = T::one() + T::one();
        let mo = &cache.moments;
        // dL/dv = dL/dz * eps / (2 s)
        let mut g_var = Matrix::zeros(grad_pre.raw_dim());
        Zip::from(&mut g_var)
            .and(&grad_pre)
            .and(&cache.eps)
            .and(&cache.std)
            .for_each(|gv, &g, &e, &s| {
                *gv = if s > T::zero() {
                    g * e / (two * s)
                } else {
                    T::zero()
                };
            });
        let sq = cache.input.mapv(|a| a * a);
        let g_mean_w = standard(grad_pre.t().dot(&cache.input));
        let g_var_w = standard(g_var.t().dot(&sq));

        let mut grad = LayerGrad::zeros(self.n_out(), self.n_in());
        let (gm_s, gv_s) = (std_slice(&g_mean_w), std_slice(&g_var_w));
        let (a_s, s_s) = (std_slice(&mo.alpha), std_slice(&mo.sigma));
        let (mu_s, rho_s) = (std_slice(&self.mu), std_slice(&self.rho));
        for (idx, ((dmu, drho), dlam)) in grad
            .mu
            .iter_mut()
            .zip(grad.rho.iter_mut())
            .zip(grad.lambda.iter_mut())
            .enumerate()
        {
            let (gm, gv, a, s, m, r) = (
                gm_s[idx], gv_s[idx], a_s[idx], s_s[idx], mu_s[idx], rho_s[idx],
            );
            *dmu = gm * a + gv * two * a * (T::one() - a) * m;
            *drho = gv * two * a * s * sigmoid(r);
            let dalpha = gm * m + gv * (s * s + m * m - two * a * m * m);
            *dlam = dalpha * a * (T::one() - a);
        }
        grad.bias_mu = grad_pre.sum_axis(Axis(0));
        let g_bias_var = g_var.sum_axis(Axis(0));
        Zip::from(&mut grad.bias_rho)
            .and(&g_bias_var)
            .and(&mo.bias_sigma)
            .and(&self.bias_rho)
            .for_each(|d, &gv, &s, &r| *d = gv * two * s * sigmoid(r));

        let input_grad = need_input_grad.then(|| {
            let mut g = grad_pre.dot(&mo.mean_w);
            let gv = g_var.dot(&mo.var_w);
            Zip::from(&mut g)
                .and(&gv)
                .and(&cache.input)
                .for_each(|g, &gv, &a| *g += two * a * gv);
            g
        });
        Ok((grad, input_grad))
    }

    /// Pre-activations of the sparse network defined by `mask`, using either
    /// the posterior means or one fresh draw `w ~ N(mu, sigma^2)` per edge.
    pub fn mpm_forward(
        &self,
        input: ArrayView2<'_, T>,
        mask: &LayerMask,
        sample_weights: bool,
        rng: &mut Rng,
    ) -> Result<Matrix<T>> {
        self.check_input(&input)?;
        let (weights, bias) = self.masked_weights(mask, sample_weights, rng)?;
        let mut z = input.dot(&weights.t());
        z += &bias;
        Ok(z)
    }

    /// Masked weight matrix and bias vector: means, or one posterior draw.
    pub fn masked_weights(
        &self,
        mask: &LayerMask,
        sample_weights: bool,
        rng: &mut Rng,
    ) -> Result<(Matrix<T>, Vector<T>)> {
        if mask.dim() != self.mu.dim() {
            return Err(Error::dim("mask rows*cols", self.mu.len(), mask.len()));
        }
        if !sample_weights {
            let w = Matrix::from_shape_fn(self.mu.raw_dim(), |(p, k)| {
                if mask.get(p, k) {
                    self.mu[[p, k]]
                } else {
                    T::zero()
                }
            });
            return Ok((w, self.bias_mu.clone()));
        }
        let sigma = self.sigma();
        let mut w = Matrix::zeros(self.mu.raw_dim());
        for ((p, k), slot) in w.indexed_iter_mut() {
            // draw for every edge so the stream does not depend on the mask
            let e = T::of(rng.normal());
            if mask.get(p, k) {
                *slot = self.mu[[p, k]] + sigma[[p, k]] * e;
            }
        }
        let bias_sigma = self.bias_sigma();
        let bias: Array1<T> = self
            .bias_mu
            .iter()
            .zip(bias_sigma.iter())
            .map(|(&m, &s)| m + s * T::of(rng.normal()))
            .collect();
        Ok((w, bias))
    }

    /// `KL(q || p)` for this layer in closed form.
    pub fn kl(&self, prior: &LayerPrior) -> T {
        self.kl_with(prior, None)
    }

    /// Adds `scale * dKL/dparam` into `grad` and returns the unscaled KL.
    pub fn accumulate_kl_grad(&self, prior: &LayerPrior, scale: T, grad: &mut LayerGrad<T>) -> T {
        self.kl_with(prior, Some((scale, grad)))
    }

    fn kl_with(&self, prior: &LayerPrior, mut grad: Option<(T, &mut LayerGrad<T>)>) -> T {
        let tau = T::of(prior.prior_std);
        let tau2 = tau * tau;
        let psi = T::of(prior.psi);
        let half = T::of(0.5);
        let lo = T::of(ALPHA_FLOOR);
        let hi = T::one() - lo;
        let mut total = T::zero();

        for (idx, &lam) in self.lambda.indexed_iter() {
            let raw = sigmoid(lam);
            let a = raw.max(lo).min(hi);
            let m = self.mu[idx];
            let r = self.rho[idx];
            let s = softplus(r);
            let slab = (tau / s).ln() + (s * s + m * m) / (two_t::<T>() * tau2) - half;
            let incl = (a / psi).ln();
            let excl = ((T::one() - a) / (T::one() - psi)).ln();
            total = total + a * (incl + slab) + (T::one() - a) * excl;
            if let Some((scale, g)) = grad.as_mut() {
                g.mu[idx] += *scale * a * m / tau2;
                let dsigma = a * (s / tau2 - T::one() / s);
                g.rho[idx] += *scale * dsigma * sigmoid(r);
                if raw > lo && raw < hi {
                    let dalpha = incl + slab - excl;
                    g.lambda[idx] += *scale * dalpha * raw * (T::one() - raw);
                }
            }
        }
        for p in 0..self.n_out() {
            let m = self.bias_mu[p];
            let r = self.bias_rho[p];
            let s = softplus(r);
            total = total + (tau / s).ln() + (s * s + m * m) / (two_t::<T>() * tau2) - half;
            if let Some((scale, g)) = grad.as_mut() {
                g.bias_mu[p] += *scale * m / tau2;
                g.bias_rho[p] += *scale * (s / tau2 - T::one() / s) * sigmoid(r);
            }
        }
        total
    }

    /// Mutable parameter blocks, in the same order as [`LayerGrad::blocks`].
    pub fn blocks_mut(&mut self) -> [&mut [T]; 5] {
        [
            self.mu.as_slice_mut().expect("standard layout"),
            self.rho.as_slice_mut().expect("standard layout"),
            self.lambda.as_slice_mut().expect("standard layout"),
            self.bias_mu.as_slice_mut().expect("standard layout"),
            self.bias_rho.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn blocks(&self) -> [&[T]; 5] {
        [
            self.mu.as_slice().expect("standard layout"),
            self.rho.as_slice().expect("standard layout"),
            self.lambda.as_slice().expect("standard layout"),
            self.bias_mu.as_slice().expect("standard layout"),
            self.bias_rho.as_slice().expect("standard layout"),
        ]
    }
}

fn standard<T: Clone>(m: Matrix<T>) -> Matrix<T> {
    if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().into_owned()
    }
}

fn std_slice<T>(m: &Matrix<T>) -> &[T] {
    m.as_slice().expect("standard layout")
}

fn two_t<T: Real>() -> T {
    T::one() + T::one()
}

/// Plain affine layer used by the frequentist L1 baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub weight: Matrix<T>,
    pub bias: Vector<T>,
    hidden_inputs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad<T> {
    pub weight: Matrix<T>,
    pub bias: Vector<T>,
}

impl<T: Real> DenseGrad<T> {
    pub fn blocks(&self) -> [&[T]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }
}

impl<T: Real> DenseLayer<T> {
    pub fn from_parts(weight: Matrix<T>, bias: Vector<T>, hidden_inputs: usize) -> Result<Self> {
        if bias.len() != weight.nrows() {
            return Err(Error::dim("dense bias", weight.nrows(), bias.len()));
        }
        if hidden_inputs > weight.ncols() {
            return Err(Error::dim("hidden_inputs", weight.ncols(), hidden_inputs));
        }
        Ok(Self {
            weight: weight.as_standard_layout().into_owned(),
            bias,
            hidden_inputs,
        })
    }

    pub fn init(n_out: usize, hidden_inputs: usize, n_covariates: usize, rng: &mut Rng) -> Self {
        let n_in = hidden_inputs + n_covariates;
        let bound = 1.0 / (n_in.max(1) as f64).sqrt();
        Self {
            weight: Matrix::from_shape_fn((n_out, n_in), |_| T::of(rng.uniform(-bound, bound))),
            bias: Vector::from_shape_fn(n_out, |_| T::of(rng.uniform(-bound, bound))),
            hidden_inputs,
        }
    }

    pub fn n_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn n_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn hidden_inputs(&self) -> usize {
        self.hidden_inputs
    }

    pub fn forward(&self, input: ArrayView2<'_, T>) -> Result<Matrix<T>> {
        if input.ncols() != self.n_in() {
            return Err(Error::dim("layer input width", self.n_in(), input.ncols()));
        }
        let mut z = input.dot(&self.weight.t());
        z += &self.bias;
        Ok(z)
    }

    pub fn backward(
        &self,
        input: ArrayView2<'_, T>,
        grad_pre: ArrayView2<'_, T>,
        need_input_grad: bool,
    ) -> (DenseGrad<T>, Option<Matrix<T>>) {
        let grad = DenseGrad {
            weight: standard(grad_pre.t().dot(&input)),
            bias: grad_pre.sum_axis(Axis(0)),
        };
        let input_grad = need_input_grad.then(|| grad_pre.dot(&self.weight));
        (grad, input_grad)
    }

    pub fn blocks_mut(&mut self) -> [&mut [T]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn check_finite(&self) -> Result<()> {
        if math::all_finite(self.weight.iter().copied())
            && math::all_finite(self.bias.iter().copied())
        {
            Ok(())
        } else {
            Err(Error::NonFinite("dense layer parameters".into()))
        }
    }
}
