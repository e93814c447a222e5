//! Full input-skip networks: architecture, likelihood heads, sampled and
//! fixed-weight forward passes, predictive averaging, KL and the L1 baseline.

use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{
    DenseGrad, DenseLayer, LayerGrad, LayerInit, LayerPrior, LrtCache, VariationalLayer,
};
use crate::math::{self, relu_grad, sigmoid, softmax_rows, softplus, Matrix, Vector};
use crate::rng::{LayerStreams, Purpose, Rng};
use crate::scalar::Real;
use crate::structure::{LayerMask, StructureMask};

/// Smallest probability allowed inside a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        }
    }

    pub fn is_piecewise_linear(self) -> bool {
        matches!(self, Activation::Relu)
    }

    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Sigmoid => sigmoid(z),
            Activation::Relu => z.max(T::zero()),
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a`.
    fn grad<T: Real>(self, z: T, a: T) -> T {
        match self {
            Activation::Sigmoid => a * (T::one() - a),
            Activation::Relu => relu_grad(z),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Single logit, `p = sigmoid(z)`.
    Bernoulli,
    /// One logit per class, `p = softmax(z)`.
    Categorical,
    /// Identity mean with fixed variance `phi`.
    Gaussian,
}

/// Output distribution: likelihood family plus its fixed dispersion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub likelihood: Likelihood,
    pub phi: f64,
}

impl Head {
    /// Likelihood parameters from the linear predictor.
    pub fn transform<T: Real>(&self, logits: &Matrix<T>) -> Matrix<T> {
        match self.likelihood {
            Likelihood::Bernoulli => logits.mapv(sigmoid),
            Likelihood::Categorical => softmax_rows(logits),
            Likelihood::Gaussian => logits.clone(),
        }
    }

    /// `log f(y; params)` for one observation. Probabilities are floored at
    /// [`PROB_FLOOR`].
    pub fn log_likelihood<T: Real>(&self, params: ArrayView1<'_, T>, y: f64) -> Result<f64> {
        let floor = PROB_FLOOR;
        match self.likelihood {
            Likelihood::Bernoulli => {
                let p = params
                    .first()
                    .ok_or_else(|| Error::dim("bernoulli params", 1, 0))?
                    .as_f64()
                    .clamp(floor, 1.0 - floor);
                if y != 0.0 && y != 1.0 {
                    return Err(Error::InvalidArgument(format!("bernoulli label {y}")));
                }
                Ok(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            }
            Likelihood::Categorical => {
                let class = class_index(y, params.len())?;
                Ok(params[class].as_f64().max(floor).ln())
            }
            Likelihood::Gaussian => {
                let m = params
                    .first()
                    .ok_or_else(|| Error::dim("gaussian params", 1, 0))?
                    .as_f64();
                let phi = self.phi;
                Ok(-0.5 * (2.0 * std::f64::consts::PI * phi).ln() - (y - m).powi(2) / (2.0 * phi))
            }
        }
    }

    /// Summed negative log-likelihood over a batch, computed from logits, and
    /// its gradient with respect to the logits.
    pub fn nll_and_grad<T: Real>(
        &self,
        logits: &Matrix<T>,
        y: ArrayView1<'_, f64>,
    ) -> Result<(f64, Matrix<T>)> {
        if logits.nrows() != y.len() {
            return Err(Error::dim("labels", logits.nrows(), y.len()));
        }
        let mut grad = Matrix::zeros(logits.raw_dim());
        let mut total = 0.0;
        match self.likelihood {
            Likelihood::Bernoulli => {
                for (i, &yi) in y.iter().enumerate() {
                    let z = logits[[i, 0]];
                    let zf = z.as_f64();
                    // -log p(y | z) = softplus(z) - y z
                    total += softplus(zf) - yi * zf;
                    grad[[i, 0]] = sigmoid(z) - T::of(yi);
                }
            }
            Likelihood::Categorical => {
                let probs = softmax_rows(logits);
                let c = logits.ncols();
                for (i, &yi) in y.iter().enumerate() {
                    let class = class_index(yi, c)?;
                    let row = logits.row(i);
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
                    let lse = max
                        + row
                            .iter()
                            .map(|z| (z.as_f64() - max).exp())
                            .sum::<f64>()
                            .ln();
                    total += lse - row[class].as_f64();
                    for k in 0..c {
                        grad[[i, k]] = probs[[i, k]];
                    }
                    grad[[i, class]] -= T::one();
                }
            }
            Likelihood::Gaussian => {
                let phi = self.phi;
                let norm = 0.5 * (2.0 * std::f64::consts::PI * phi).ln();
                for (i, &yi) in y.iter().enumerate() {
                    let m = logits[[i, 0]];
                    let r = m.as_f64() - yi;
                    total += norm + r * r / (2.0 * phi);
                    grad[[i, 0]] = T::of(r / phi);
                }
            }
        }
        Ok((total, grad))
    }
}

pub(crate) fn class_index(y: f64, n_classes: usize) -> Result<usize> {
    if y < 0.0 || y.fract() != 0.0 || y as usize >= n_classes {
        return Err(Error::InvalidArgument(format!(
            "class label {y} outside [0, {n_classes})"
        )));
    }
    Ok(y as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode {
    /// Spike-and-slab mean-field posterior sampled with the local reparameterization.
    Variational,
    /// Point-estimate weights with an L1 penalty; `|w| > prune_threshold`
    /// defines the sparse network.
    DeterministicL1 {
        l1_lambda: f64,
        prune_threshold: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub n_covariates: usize,
    /// Empty for the linear (BLR) special case.
    pub hidden_widths: Vec<usize>,
    pub n_outputs: usize,
    pub activation: Activation,
    pub head: Head,
    pub mode: Mode,
    pub prior: LayerPrior,
    pub init: LayerInit,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_covariates == 0 {
            return bad("network needs at least one covariate".into());
        }
        if self.n_outputs == 0 {
            return bad("network needs at least one output".into());
        }
        if self.hidden_widths.contains(&0) {
            return bad("hidden layers must have at least one unit".into());
        }
        match self.head.likelihood {
            Likelihood::Bernoulli | Likelihood::Gaussian if self.n_outputs != 1 => {
                return bad(format!(
                    "{:?} head takes exactly one output, got {}",
                    self.head.likelihood, self.n_outputs
                ));
            }
            Likelihood::Categorical if self.n_outputs < 2 => {
                return bad("categorical head needs at least two classes".into());
            }
            _ => {}
        }
        if !(self.head.phi > 0.0) {
            return bad(format!("phi must be positive, got {}", self.head.phi));
        }
        if let Mode::DeterministicL1 {
            l1_lambda,
            prune_threshold,
        } = self.mode
        {
            if !(prune_threshold > 0.0) {
                return bad(format!(
                    "prune_threshold must be positive, got {prune_threshold}"
                ));
            }
            if !(l1_lambda >= 0.0) {
                return bad(format!("l1_lambda must be non-negative, got {l1_lambda}"));
            }
        }
        self.prior.validate()
    }

    /// Number of weight layers, including the output layer.
    pub fn n_layers(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    /// `(n_out, hidden_inputs)` for layer `j`; its input width adds the covariates.
    pub fn layer_shape(&self, j: usize) -> (usize, usize) {
        let n_out = self.hidden_widths.get(j).copied().unwrap_or(self.n_outputs);
        let hidden_inputs = if j == 0 { 0 } else { self.hidden_widths[j - 1] };
        (n_out, hidden_inputs)
    }

    /// Non-bias weight count.
    pub fn n_weights(&self) -> usize {
        (0..self.n_layers())
            .map(|j| {
                let (o, h) = self.layer_shape(j);
                o * (h + self.n_covariates)
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layers<T> {
    Variational(Vec<VariationalLayer<T>>),
    Dense(Vec<DenseLayer<T>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub layers: Layers<T>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub enum LayerCaches<T> {
    Variational(Vec<LrtCache<T>>),
    Dense(Vec<Matrix<T>>),
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub layers: LayerCaches<T>,
    /// Hidden pre-activations, one matrix per hidden layer.
    pub pre_acts: Vec<Matrix<T>>,
    /// Hidden activations, one matrix per hidden layer.
    pub hidden: Vec<Matrix<T>>,
    pub logits: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NetworkGrad<T> {
    Variational(Vec<LayerGrad<T>>),
    Dense(Vec<DenseGrad<T>>),
}

/// Concatenates the previous hidden activations with the covariates.
pub(crate) fn layer_input<T: Real>(prev: Option<&Matrix<T>>, x: ArrayView2<'_, T>) -> Matrix<T> {
    match prev {
        None => x.to_owned(),
        Some(h) => concatenate![Axis(1), h.view(), x],
    }
}

impl<T: Real> Network<T> {
    /// Fresh network with parameters drawn from per-layer init substreams.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let v = spec.n_covariates;
        let layers = match spec.mode {
            Mode::Variational => Layers::Variational(
                (0..spec.n_layers())
                    .map(|j| {
                        let (o, h) = spec.layer_shape(j);
                        let mut rng = Rng::substream(seed, Purpose::Init, j as u32);
                        VariationalLayer::init(o, h, v, &spec.init, &mut rng)
                    })
                    .collect(),
            ),
            Mode::DeterministicL1 { .. } => Layers::Dense(
                (0..spec.n_layers())
                    .map(|j| {
                        let (o, h) = spec.layer_shape(j);
                        let mut rng = Rng::substream(seed, Purpose::Init, j as u32);
                        DenseLayer::init(o, h, v, &mut rng)
                    })
                    .collect(),
            ),
        };
        Ok(Self { spec, layers, seed })
    }

    /// Assembles a network from explicit layers, checking the wiring.
    pub fn from_layers(spec: NetworkSpec, layers: Layers<T>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let shapes: Vec<(usize, usize, usize)> = match &layers {
            Layers::Variational(ls) => ls
                .iter()
                .map(|l| (l.n_out(), l.hidden_inputs(), l.n_in()))
                .collect(),
            Layers::Dense(ls) => ls
                .iter()
                .map(|l| (l.n_out(), l.hidden_inputs(), l.n_in()))
                .collect(),
        };
        if shapes.len() != spec.n_layers() {
            return Err(Error::dim("layer count", spec.n_layers(), shapes.len()));
        }
        for (j, &(o, h, i)) in shapes.iter().enumerate() {
            let (eo, eh) = spec.layer_shape(j);
            if o != eo {
                return Err(Error::dim("layer outputs", eo, o));
            }
            if h != eh || i != eh + spec.n_covariates {
                return Err(Error::dim("layer inputs", eh + spec.n_covariates, i));
            }
        }
        let mode_ok = matches!(
            (&layers, spec.mode),
            (Layers::Variational(_), Mode::Variational)
                | (Layers::Dense(_), Mode::DeterministicL1 { .. })
        );
        if !mode_ok {
            return Err(Error::InvalidArgument(
                "layer kind does not match network mode".into(),
            ));
        }
        Ok(Self { spec, layers, seed })
    }

    pub fn n_layers(&self) -> usize {
        self.spec.n_layers()
    }

    pub fn head(&self) -> Head {
        self.spec.head
    }

    pub fn is_variational(&self) -> bool {
        matches!(self.layers, Layers::Variational(_))
    }

    pub fn variational_layers(&self) -> Option<&[VariationalLayer<T>]> {
        match &self.layers {
            Layers::Variational(ls) => Some(ls),
            Layers::Dense(_) => None,
        }
    }

    pub fn dense_layers(&self) -> Option<&[DenseLayer<T>]> {
        match &self.layers {
            Layers::Dense(ls) => Some(ls),
            Layers::Variational(_) => None,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match &self.layers {
            Layers::Variational(ls) => ls.iter().try_for_each(|l| l.check_finite()),
            Layers::Dense(ls) => ls.iter().try_for_each(|l| l.check_finite()),
        }
    }

    fn check_x(&self, x: &ArrayView2<'_, T>) -> Result<()> {
        if x.ncols() != self.spec.n_covariates {
            return Err(Error::dim("covariates", self.spec.n_covariates, x.ncols()));
        }
        Ok(())
    }

    /// One stochastic pass: LRT pre-activation sampling in every layer
    /// (variational mode) or the plain affine pass (L1 mode). Returns the
    /// likelihood parameters and the cache for [`Self::backward`].
    pub fn forward_sample(
        &self,
        x: ArrayView2<'_, T>,
        streams: &mut LayerStreams,
    ) -> Result<(Matrix<T>, ForwardCache<T>)> {
        self.check_x(&x)?;
        let n_layers = self.n_layers();
        let act = self.spec.activation;
        let mut pre_acts = Vec::with_capacity(n_layers - 1);
        let mut hidden: Vec<Matrix<T>> = Vec::with_capacity(n_layers - 1);
        let mut logits = None;
        let caches = match &self.layers {
            Layers::Variational(ls) => {
                if streams.len() < n_layers {
                    return Err(Error::dim("noise streams", n_layers, streams.len()));
                }
                let mut caches = Vec::with_capacity(n_layers);
                for (j, layer) in ls.iter().enumerate() {
                    let input = layer_input(hidden.last(), x);
                    let (z, cache) = layer.lrt_forward(input.view(), streams.layer(j))?;
                    caches.push(cache);
                    if j + 1 < n_layers {
                        hidden.push(z.mapv(|v| act.apply(v)));
                        pre_acts.push(z);
                    } else {
                        logits = Some(z);
                    }
                }
                LayerCaches::Variational(caches)
            }
            Layers::Dense(ls) => {
                let mut inputs = Vec::with_capacity(n_layers);
                for (j, layer) in ls.iter().enumerate() {
                    let input = layer_input(hidden.last(), x);
                    let z = layer.forward(input.view())?;
                    inputs.push(input);
                    if j + 1 < n_layers {
                        hidden.push(z.mapv(|v| act.apply(v)));
                        pre_acts.push(z);
                    } else {
                        logits = Some(z);
                    }
                }
                LayerCaches::Dense(inputs)
            }
        };
        let logits = logits.expect("network has an output layer");
        let params = self.spec.head.transform(&logits);
        Ok((
            params,
            ForwardCache {
                layers: caches,
                pre_acts,
                hidden,
                logits,
            },
        ))
    }

    /// Convenience wrapper for a single covariate vector.
    pub fn forward_sample_one(
        &self,
        x: ArrayView1<'_, T>,
        streams: &mut LayerStreams,
    ) -> Result<(Vector<T>, ForwardCache<T>)> {
        let x2 = x.insert_axis(Axis(0));
        let (p, cache) = self.forward_sample(x2, streams)?;
        Ok((p.row(0).to_owned(), cache))
    }

    /// Parameter gradients of `sum(grad_logits * logits)`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_logits: &Matrix<T>,
    ) -> Result<NetworkGrad<T>> {
        let n_layers = self.n_layers();
        let act = self.spec.activation;
        let mut upstream = grad_logits.clone();
        match (&self.layers, &cache.layers) {
            (Layers::Variational(ls), LayerCaches::Variational(cs)) => {
                let mut grads = Vec::with_capacity(n_layers);
                for j in (0..n_layers).rev() {
                    let layer = &ls[j];
                    let need = j > 0;
                    let (g, gin) = layer.layer_backward(&cs[j], upstream.view(), need)?;
                    grads.push(g);
                    if let Some(gin) = gin {
                        upstream = self.hidden_grad(&gin, layer.hidden_inputs(), cache, j - 1, act);
                    }
                }
                grads.reverse();
                Ok(NetworkGrad::Variational(grads))
            }
            (Layers::Dense(ls), LayerCaches::Dense(inputs)) => {
                let mut grads = Vec::with_capacity(n_layers);
                for j in (0..n_layers).rev() {
                    let layer = &ls[j];
                    let (g, gin) = layer.backward(inputs[j].view(), upstream.view(), j > 0);
                    grads.push(g);
                    if let Some(gin) = gin {
                        upstream = self.hidden_grad(&gin, layer.hidden_inputs(), cache, j - 1, act);
                    }
                }
                grads.reverse();
                Ok(NetworkGrad::Dense(grads))
            }
            _ => Err(Error::InvalidArgument(
                "forward cache does not match network mode".into(),
            )),
        }
    }

    fn hidden_grad(
        &self,
        grad_input: &Matrix<T>,
        hidden_inputs: usize,
        cache: &ForwardCache<T>,
        h: usize,
        act: Activation,
    ) -> Matrix<T> {
        let mut g = grad_input.slice(s![.., ..hidden_inputs]).to_owned();
        ndarray::Zip::from(&mut g)
            .and(&cache.pre_acts[h])
            .and(&cache.hidden[h])
            .for_each(|g, &z, &a| *g *= act.grad(z, a));
        g
    }

    /// Sum of per-layer KL divergences; zero for the L1 baseline.
    pub fn total_kl(&self) -> T {
        match &self.layers {
            Layers::Variational(ls) => ls.iter().map(|l| l.kl(&self.spec.prior)).sum(),
            Layers::Dense(_) => T::zero(),
        }
    }

    /// `sum |w|` over non-bias weights.
    pub fn l1_norm(&self) -> T {
        match &self.layers {
            Layers::Dense(ls) => ls
                .iter()
                .map(|l| l.weight.iter().map(|w| w.abs()).sum::<T>())
                .sum(),
            Layers::Variational(ls) => ls
                .iter()
                .map(|l| l.mu.iter().map(|w| w.abs()).sum::<T>())
                .sum(),
        }
    }

    /// L1 objective on a batch: summed NLL plus `l1_lambda * sum |w|`.
    pub fn l1_loss(&self, x: ArrayView2<'_, T>, y: ArrayView1<'_, f64>) -> Result<f64> {
        let Mode::DeterministicL1 { l1_lambda, .. } = self.spec.mode else {
            return Err(Error::InvalidArgument(
                "l1_loss needs deterministic_l1 mode".into(),
            ));
        };
        let mut streams = LayerStreams::new(self.seed, Purpose::Noise, self.n_layers());
        let (_, cache) = self.forward_sample(x, &mut streams)?;
        let (nll, _) = self.spec.head.nll_and_grad(&cache.logits, y)?;
        Ok(nll + l1_lambda * self.l1_norm().as_f64())
    }

    /// L1 objective and its (sub)gradient; `sign(0) = 0`.
    pub fn l1_loss_and_grad(
        &self,
        x: ArrayView2<'_, T>,
        y: ArrayView1<'_, f64>,
    ) -> Result<(f64, NetworkGrad<T>)> {
        self.l1_step(x, y).map(|(loss, _, _, grad)| (loss, grad))
    }

    /// L1 objective, plain NLL, logits and gradient from one pass.
    pub(crate) fn l1_step(
        &self,
        x: ArrayView2<'_, T>,
        y: ArrayView1<'_, f64>,
    ) -> Result<(f64, f64, Matrix<T>, NetworkGrad<T>)> {
        let Mode::DeterministicL1 { l1_lambda, .. } = self.spec.mode else {
            return Err(Error::InvalidArgument(
                "l1_loss needs deterministic_l1 mode".into(),
            ));
        };
        let mut streams = LayerStreams::new(self.seed, Purpose::Noise, self.n_layers());
        let (_, cache) = self.forward_sample(x, &mut streams)?;
        let (nll, g) = self.spec.head.nll_and_grad(&cache.logits, y)?;
        let mut grad = self.backward(&cache, &g)?;
        let lam = T::of(l1_lambda);
        if let (NetworkGrad::Dense(gs), Layers::Dense(ls)) = (&mut grad, &self.layers) {
            for (g, l) in gs.iter_mut().zip(ls) {
                ndarray::Zip::from(&mut g.weight)
                    .and(&l.weight)
                    .for_each(|g, &w| {
                        if w != T::zero() {
                            *g += lam * w.signum();
                        }
                    });
            }
        }
        let loss = nll + l1_lambda * self.l1_norm().as_f64();
        Ok((loss, nll, cache.logits, grad))
    }

    /// Mask of edges the sparse model keeps: `alpha > 0.5` (variational) or
    /// `|w| > prune_threshold` (L1).
    pub fn sparse_mask(&self) -> StructureMask {
        match (&self.layers, self.spec.mode) {
            (Layers::Variational(ls), _) => StructureMask::new(
                ls.iter()
                    .map(|l| {
                        LayerMask::from_fn(l.n_out(), l.n_in(), l.hidden_inputs(), |p, k| {
                            sigmoid(l.lambda[[p, k]]) > T::of(0.5)
                        })
                    })
                    .collect(),
            ),
            (
                Layers::Dense(ls),
                Mode::DeterministicL1 {
                    prune_threshold, ..
                },
            ) => StructureMask::new(
                ls.iter()
                    .map(|l| {
                        LayerMask::from_fn(l.n_out(), l.n_in(), l.hidden_inputs(), |p, k| {
                            l.weight[[p, k]].abs() > T::of(prune_threshold)
                        })
                    })
                    .collect(),
            ),
            (Layers::Dense(ls), Mode::Variational) => StructureMask::new(
                ls.iter()
                    .map(|l| LayerMask::full(l.n_out(), l.n_in(), l.hidden_inputs()))
                    .collect(),
            ),
        }
    }

    /// Every edge on.
    pub fn full_mask(&self) -> StructureMask {
        StructureMask::new(
            (0..self.n_layers())
                .map(|j| {
                    let (o, h) = self.spec.layer_shape(j);
                    LayerMask::full(o, h + self.spec.n_covariates, h)
                })
                .collect(),
        )
    }

    /// Fixed-weight network restricted to `mask`. Variational layers use the
    /// posterior means, or one posterior draw per edge when `rngs` is given.
    pub fn freeze(
        &self,
        mask: &StructureMask,
        rngs: Option<&mut LayerStreams>,
    ) -> Result<FrozenNetwork<T>> {
        if mask.n_layers() != self.n_layers() {
            return Err(Error::dim("mask layers", self.n_layers(), mask.n_layers()));
        }
        let layers = match &self.layers {
            Layers::Variational(ls) => {
                let mut out = Vec::with_capacity(ls.len());
                let mut rngs = rngs;
                for (j, l) in ls.iter().enumerate() {
                    let (w, b) = match rngs.as_deref_mut() {
                        Some(streams) => {
                            l.masked_weights(&mask.layers[j], true, streams.layer(j))?
                        }
                        None => {
                            let mut unused = Rng::new(0);
                            l.masked_weights(&mask.layers[j], false, &mut unused)?
                        }
                    };
                    out.push(DenseLayer::from_parts(w, b, l.hidden_inputs())?);
                }
                out
            }
            Layers::Dense(ls) => ls
                .iter()
                .zip(&mask.layers)
                .map(|(l, m)| {
                    if m.dim() != l.weight.dim() {
                        return Err(Error::dim("mask rows*cols", l.weight.len(), m.len()));
                    }
                    let w = Array2::from_shape_fn(l.weight.raw_dim(), |(p, k)| {
                        if m.get(p, k) {
                            l.weight[[p, k]]
                        } else {
                            T::zero()
                        }
                    });
                    DenseLayer::from_parts(w, l.bias.clone(), l.hidden_inputs())
                })
                .collect::<Result<_>>()?,
        };
        Ok(FrozenNetwork {
            layers,
            mask: mask.clone(),
            activation: self.spec.activation,
            head: self.spec.head,
            n_covariates: self.spec.n_covariates,
        })
    }

    /// Monte-Carlo predictive distribution from `n_samples` draws.
    ///
    /// `Full` averages over sampled structures and weights (LRT in variational
    /// mode); `Sparse` fixes the structure to `mask` and samples the weights.
    pub fn predict(
        &self,
        x: ArrayView2<'_, T>,
        n_samples: usize,
        seed: u64,
        variant: &PredictVariant,
    ) -> Result<Predictive<T>> {
        if n_samples == 0 {
            return Err(Error::InvalidArgument(
                "predict needs at least one sample".into(),
            ));
        }
        self.check_x(&x)?;
        let mut streams = LayerStreams::new(seed, Purpose::Predict, self.n_layers());
        let mut samples = Vec::with_capacity(n_samples);
        match variant {
            PredictVariant::Full => {
                for _ in 0..n_samples {
                    samples.push(self.forward_sample(x, &mut streams)?.0);
                }
            }
            PredictVariant::Sparse(mask) => {
                if self.is_variational() {
                    for _ in 0..n_samples {
                        let frozen = self.freeze(mask, Some(&mut streams))?;
                        samples.push(frozen.predict_params(x)?);
                    }
                } else {
                    let frozen = self.freeze(mask, None)?;
                    let p = frozen.predict_params(x)?;
                    samples.extend(std::iter::repeat_n(p, n_samples));
                }
            }
        }
        Ok(Predictive { samples })
    }
}

#[derive(Clone, Debug)]
pub enum PredictVariant {
    Full,
    Sparse(StructureMask),
}

/// Per-draw likelihood parameters, each `(n_points, n_outputs)`.
#[derive(Clone, Debug)]
pub struct Predictive<T> {
    pub samples: Vec<Matrix<T>>,
}

#[derive(Clone, Debug)]
pub struct PredictiveSummary<T> {
    pub mean: Matrix<T>,
    pub lower: Matrix<T>,
    pub upper: Matrix<T>,
}

impl<T: Real> Predictive<T> {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn mean(&self) -> Matrix<T> {
        let dim = self.samples[0].raw_dim();
        Matrix::from_shape_fn(dim, |idx| {
            math::shifted_mean(self.samples.iter().map(|s| s[idx])).expect("non-empty")
        })
    }

    /// Elementwise empirical quantile across draws.
    pub fn quantile(&self, q: f64) -> Matrix<T> {
        let dim = self.samples[0].raw_dim();
        let mut buf = Vec::with_capacity(self.samples.len());
        Matrix::from_shape_fn(dim, |idx| {
            buf.clear();
            buf.extend(self.samples.iter().map(|s| s[idx]));
            math::quantile(&buf, q)
        })
    }

    /// Mean with the central 95% credible band.
    pub fn summary(&self) -> PredictiveSummary<T> {
        PredictiveSummary {
            mean: self.mean(),
            lower: self.quantile(0.025),
            upper: self.quantile(0.975),
        }
    }
}

/// A network with fixed weights and a fixed structure.
#[derive(Clone, Debug)]
pub struct FrozenNetwork<T> {
    pub layers: Vec<DenseLayer<T>>,
    pub mask: StructureMask,
    pub activation: Activation,
    pub head: Head,
    pub n_covariates: usize,
}

/// Pre-activations and activations of a fixed-weight pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub pre_acts: Vec<Matrix<T>>,
    pub hidden: Vec<Matrix<T>>,
    pub logits: Matrix<T>,
}

impl<T: Real> FrozenNetwork<T> {
    pub fn forward_trace(&self, x: ArrayView2<'_, T>) -> Result<Trace<T>> {
        if x.ncols() != self.n_covariates {
            return Err(Error::dim("covariates", self.n_covariates, x.ncols()));
        }
        let n = self.layers.len();
        let mut pre_acts = Vec::with_capacity(n - 1);
        let mut hidden: Vec<Matrix<T>> = Vec::with_capacity(n - 1);
        for (j, layer) in self.layers.iter().enumerate() {
            let input = layer_input(hidden.last(), x);
            let z = layer.forward(input.view())?;
            if j + 1 < n {
                hidden.push(z.mapv(|v| self.activation.apply(v)));
                pre_acts.push(z);
            } else {
                return Ok(Trace {
                    pre_acts,
                    hidden,
                    logits: z,
                });
            }
        }
        unreachable!("frozen network has an output layer")
    }

    /// Linear predictor (pre-head output).
    pub fn logits(&self, x: ArrayView2<'_, T>) -> Result<Matrix<T>> {
        Ok(self.forward_trace(x)?.logits)
    }

    pub fn predict_params(&self, x: ArrayView2<'_, T>) -> Result<Matrix<T>> {
        Ok(self.head.transform(&self.logits(x)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    const SAT: f64 = 1e6;

    fn spec(widths: &[usize], v: usize, likelihood: Likelihood, c: usize) -> NetworkSpec {
        NetworkSpec {
            n_covariates: v,
            hidden_widths: widths.to_vec(),
            n_outputs: c,
            activation: Activation::Sigmoid,
            head: Head {
                likelihood,
                phi: 1.0,
            },
            mode: Mode::Variational,
            prior: LayerPrior::new(2.5, 0.1).unwrap(),
            init: LayerInit {
                sigma: 0.3,
                lambda_hidden: (-2.0, 2.0),
                lambda_covariate: (-2.0, 2.0),
            },
        }
    }

    fn bern() -> Head {
        Head {
            likelihood: Likelihood::Bernoulli,
            phi: 1.0,
        }
    }

    fn layers_mut(net: &mut Network<f64>) -> &mut Vec<VariationalLayer<f64>> {
        match &mut net.layers {
            Layers::Variational(ls) => ls,
            Layers::Dense(_) => unreachable!(),
        }
    }

    fn make_deterministic(net: &mut Network<f64>) {
        for l in layers_mut(net) {
            l.lambda.fill(SAT);
            l.rho.fill(-SAT);
            l.bias_rho.fill(-SAT);
        }
    }

    fn random_x(rng: &mut Rng, n: usize, v: usize) -> Matrix<f64> {
        Matrix::from_shape_fn((n, v), |_| rng.uniform(-2.0, 2.0))
    }

    #[test]
    fn log_likelihood_examples() {
        let h = bern();
        assert_eq!(
            h.log_likelihood(array![0.5].view(), 1.0).unwrap(),
            0.5f64.ln()
        );
        assert_eq!(
            h.log_likelihood(array![0.5].view(), 0.0).unwrap(),
            0.5f64.ln()
        );
        assert!(h.log_likelihood(array![0.5].view(), 2.0).is_err());
        let c = Head {
            likelihood: Likelihood::Categorical,
            phi: 1.0,
        };
        let u = Array1::from_elem(10, 0.1);
        assert!((c.log_likelihood(u.view(), 7.0).unwrap() - 0.1f64.ln()).abs() < 1e-15);
        assert!(c.log_likelihood(u.view(), 10.0).is_err());
        let g = Head {
            likelihood: Likelihood::Gaussian,
            phi: 1.0,
        };
        let v = g.log_likelihood(array![1.3].view(), 1.3).unwrap();
        assert!((v + 0.918_938_533_204_672_8).abs() < 1e-15);
    }

    #[test]
    fn batch_nll_agrees_with_log_likelihood() {
        let mut rng = Rng::new(1);
        for (lik, c) in [
            (Likelihood::Bernoulli, 1),
            (Likelihood::Categorical, 3),
            (Likelihood::Gaussian, 1),
        ] {
            let head = Head {
                likelihood: lik,
                phi: 0.7,
            };
            let logits = random_x(&mut rng, 6, c);
            let y: Array1<f64> = (0..6)
                .map(|i| match lik {
                    Likelihood::Bernoulli => (i % 2) as f64,
                    Likelihood::Categorical => (i % 3) as f64,
                    Likelihood::Gaussian => rng.normal(),
                })
                .collect();
            let params = head.transform(&logits);
            let direct: f64 = (0..6)
                .map(|i| -head.log_likelihood(params.row(i), y[i]).unwrap())
                .sum();
            let (nll, grad) = head.nll_and_grad(&logits, y.view()).unwrap();
            assert!((nll - direct).abs() < 1e-12, "{lik:?}");
            let h = 1e-6;
            for idx in ndarray::indices(logits.dim()) {
                let mut up = logits.clone();
                up[idx] += h;
                let mut dn = logits.clone();
                dn[idx] -= h;
                let fd = (head.nll_and_grad(&up, y.view()).unwrap().0
                    - head.nll_and_grad(&dn, y.view()).unwrap().0)
                    / (2.0 * h);
                assert!((fd - grad[idx]).abs() < 1e-6, "{lik:?} {idx:?}");
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(spec(&[], 0, Likelihood::Bernoulli, 1).validate().is_err());
        assert!(spec(&[], 2, Likelihood::Bernoulli, 2).validate().is_err());
        assert!(spec(&[], 2, Likelihood::Categorical, 1).validate().is_err());
        assert!(spec(&[0], 2, Likelihood::Bernoulli, 1).validate().is_err());
        let mut s = spec(&[3], 2, Likelihood::Bernoulli, 1);
        s.mode = Mode::DeterministicL1 {
            l1_lambda: 0.1,
            prune_threshold: 0.0,
        };
        assert!(s.validate().is_err());
        assert_eq!(
            spec(&[20, 20, 20, 20], 4, Likelihood::Bernoulli, 1).n_weights(),
            1544
        );
    }

    #[test]
    fn blr_reduces_to_a_glm() {
        let mut net = Network::<f64>::new(spec(&[], 3, Likelihood::Bernoulli, 1), 1).unwrap();
        make_deterministic(&mut net);
        let x = random_x(&mut Rng::new(2), 5, 3);
        let mut streams = LayerStreams::new(0, Purpose::Noise, 1);
        let (p, _) = net.forward_sample(x.view(), &mut streams).unwrap();
        let l = &net.variational_layers().unwrap()[0];
        let expect = (x.dot(&l.mu.t()) + &l.bias_mu).mapv(sigmoid);
        assert_eq!(p, expect);
    }

    #[test]
    fn blr_matches_direct_layer_call() {
        let net = Network::<f64>::new(spec(&[], 3, Likelihood::Gaussian, 1), 4).unwrap();
        let x = random_x(&mut Rng::new(3), 4, 3);
        let mut streams = LayerStreams::new(9, Purpose::Noise, 1);
        let (out, _) = net.forward_sample(x.view(), &mut streams).unwrap();
        let l = &net.variational_layers().unwrap()[0];
        let mut streams = LayerStreams::new(9, Purpose::Noise, 1);
        let (z, _) = l.lrt_forward(x.view(), streams.layer(0)).unwrap();
        assert_eq!(out, z);
        assert_eq!(net.total_kl(), l.kl(&net.spec.prior));
    }

    #[test]
    fn no_included_edges_means_constant_output() {
        let mut net = Network::<f64>::new(spec(&[4, 3], 2, Likelihood::Bernoulli, 1), 5).unwrap();
        for l in layers_mut(&mut net) {
            l.lambda.fill(-SAT);
            l.bias_rho.fill(-SAT);
        }
        let x = random_x(&mut Rng::new(6), 7, 2);
        let mut streams = LayerStreams::new(1, Purpose::Noise, 3);
        let (p, _) = net.forward_sample(x.view(), &mut streams).unwrap();
        assert!(p.iter().all(|&v| v == p[[0, 0]]));
    }

    #[test]
    fn skipping_hidden_units_leaves_an_affine_map() {
        let mut net = Network::<f64>::new(spec(&[5], 3, Likelihood::Gaussian, 1), 7).unwrap();
        make_deterministic(&mut net);
        layers_mut(&mut net)[1]
            .lambda
            .slice_mut(s![.., ..5])
            .fill(-SAT);
        let x0 = array![0.3, -1.0, 2.0];
        let d = array![0.7, 0.4, -0.9];
        let xs = ndarray::stack![Axis(0), x0, &x0 + &d, &x0 + &(&d * 2.0)];
        let mut streams = LayerStreams::new(1, Purpose::Noise, 2);
        let (z, _) = net.forward_sample(xs.view(), &mut streams).unwrap();
        assert!((z[[1, 0]] - 0.5 * (z[[0, 0]] + z[[2, 0]])).abs() < 1e-12);
    }

    #[test]
    fn one_hidden_layer_matches_weight_space_sampling() {
        let net = Network::<f64>::new(spec(&[3], 2, Likelihood::Gaussian, 1), 8).unwrap();
        let x = array![[0.8, -1.1]];
        let n = 100_000;
        let rows = x.broadcast((n, 2)).unwrap().to_owned();
        let mut streams = LayerStreams::new(3, Purpose::Noise, 2);
        let (z, _) = net.forward_sample(rows.view(), &mut streams).unwrap();
        let lrt: Vec<f64> = z.column(0).to_vec();

        let ls = net.variational_layers().unwrap();
        let mut rng = Rng::new(4);
        let draw = |l: &VariationalLayer<f64>, a: &[f64], rng: &mut Rng| -> Vec<f64> {
            let (alpha, sigma, bs) = (l.alpha(), l.sigma(), l.bias_sigma());
            (0..l.n_out())
                .map(|p| {
                    let mut z = l.bias_mu[p] + bs[p] * rng.normal();
                    for (k, &ak) in a.iter().enumerate() {
                        if rng.bernoulli(alpha[[p, k]]) {
                            z += (l.mu[[p, k]] + sigma[[p, k]] * rng.normal()) * ak;
                        }
                    }
                    z
                })
                .collect()
        };
        let oracle: Vec<f64> = (0..n)
            .map(|_| {
                let h: Vec<f64> = draw(&ls[0], &[0.8, -1.1], &mut rng)
                    .into_iter()
                    .map(sigmoid)
                    .collect();
                let input = [h[0], h[1], h[2], 0.8, -1.1];
                draw(&ls[1], &input, &mut rng)[0]
            })
            .collect();
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (
                m,
                v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64,
            )
        };
        let ((m1, v1), (m2, v2)) = (stats(&lrt), stats(&oracle));
        let se = ((v1 + v2) / n as f64).sqrt();
        assert!((m1 - m2).abs() < 4.0 * se, "{m1} vs {m2}");
        assert!((v1 / v2 - 1.0).abs() < 0.05, "{v1} vs {v2}");
    }

    /// Central differences of `sum(g * logits)` with the noise streams replayed.
    #[test]
    fn network_backward_matches_finite_differences() {
        for act in [Activation::Sigmoid, Activation::Relu] {
            let mut sp = spec(&[3, 2], 2, Likelihood::Categorical, 2);
            sp.activation = act;
            let net = Network::<f64>::new(sp, 9).unwrap();
            let mut rng = Rng::new(10);
            let x = random_x(&mut rng, 3, 2);
            let g = random_x(&mut rng, 3, 2);
            let streams = LayerStreams::new(11, Purpose::Noise, 3);
            let obj = |n: &Network<f64>| {
                let (_, c) = n.forward_sample(x.view(), &mut streams.clone()).unwrap();
                (&c.logits * &g).sum()
            };
            let (_, cache) = net.forward_sample(x.view(), &mut streams.clone()).unwrap();
            let NetworkGrad::Variational(grads) = net.backward(&cache, &g).unwrap() else {
                unreachable!()
            };
            let h = 1e-5;
            for (j, lg) in grads.iter().enumerate() {
                for b in 0..5 {
                    for i in 0..lg.blocks()[b].len() {
                        let mut up = net.clone();
                        layers_mut(&mut up)[j].blocks_mut()[b][i] += h;
                        let mut dn = net.clone();
                        layers_mut(&mut dn)[j].blocks_mut()[b][i] -= h;
                        let fd = (obj(&up) - obj(&dn)) / (2.0 * h);
                        let a = lg.blocks()[b][i];
                        // relative above 1e-3, absolute 1e-8 below (round-off of the differences)
                        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                        assert!(
                            err < 1e-5,
                            "{act:?} layer {j} block {b} entry {i}: {a} vs {fd}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn total_kl_sums_layers() {
        let mut net = Network::<f64>::new(spec(&[3], 2, Likelihood::Bernoulli, 1), 12).unwrap();
        let prior = net.spec.prior;
        let sum: f64 = net
            .variational_layers()
            .unwrap()
            .iter()
            .map(|l| l.kl(&prior))
            .sum();
        assert_eq!(net.total_kl(), sum);
        let r = crate::math::softplus_inv(prior.prior_std);
        let lg = (prior.psi / (1.0 - prior.psi)).ln();
        for l in layers_mut(&mut net) {
            l.mu.fill(0.0);
            l.bias_mu.fill(0.0);
            l.rho.fill(r);
            l.bias_rho.fill(r);
            l.lambda.fill(lg);
        }
        assert!(net.total_kl().abs() < 1e-12);
    }

    #[test]
    fn deterministic_predict_ignores_sample_count() {
        let mut net = Network::<f64>::new(spec(&[4], 3, Likelihood::Bernoulli, 1), 13).unwrap();
        make_deterministic(&mut net);
        let x = random_x(&mut Rng::new(1), 10, 3);
        let one = net
            .predict(x.view(), 1, 5, &PredictVariant::Full)
            .unwrap()
            .summary();
        let many = net
            .predict(x.view(), 100, 5, &PredictVariant::Full)
            .unwrap()
            .summary();
        assert_eq!(one.mean, many.mean);
        assert_eq!(many.lower, many.upper);
        assert!(net.predict(x.view(), 0, 5, &PredictVariant::Full).is_err());
    }

    #[test]
    fn predictive_band_brackets_the_mean() {
        let net = Network::<f64>::new(spec(&[6], 3, Likelihood::Bernoulli, 1), 14).unwrap();
        let x = random_x(&mut Rng::new(2), 1000, 3);
        let s = net
            .predict(x.view(), 30, 1, &PredictVariant::Full)
            .unwrap()
            .summary();
        for i in 0..1000 {
            assert!(s.lower[[i, 0]] <= s.mean[[i, 0]] && s.mean[[i, 0]] <= s.upper[[i, 0]]);
        }
    }

    #[test]
    fn predictive_mean_replays_per_sample_sigmoids() {
        let net = Network::<f64>::new(spec(&[4], 2, Likelihood::Bernoulli, 1), 15).unwrap();
        let x = random_x(&mut Rng::new(3), 5, 2);
        let pred = net
            .predict(x.view(), 20, 42, &PredictVariant::Full)
            .unwrap();
        let mut streams = LayerStreams::new(42, Purpose::Predict, 2);
        let mut acc = Matrix::<f64>::zeros((5, 1));
        for _ in 0..20 {
            let (_, cache) = net.forward_sample(x.view(), &mut streams).unwrap();
            acc += &cache.logits.mapv(|z| 1.0 / (1.0 + (-z).exp()));
        }
        acc /= 20.0;
        let mean = pred.mean();
        for (a, b) in mean.iter().zip(acc.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let again = net
            .predict(x.view(), 20, 42, &PredictVariant::Full)
            .unwrap();
        assert_eq!(again.samples, pred.samples);
    }

    #[test]
    fn sparse_predict_uses_the_mask() {
        let net = Network::<f64>::new(spec(&[4], 2, Likelihood::Bernoulli, 1), 16).unwrap();
        let x = random_x(&mut Rng::new(4), 6, 2);
        let mut empty = net.full_mask();
        for lm in &mut empty.layers {
            *lm = LayerMask::empty(lm.n_out(), lm.n_in(), lm.hidden_inputs());
        }
        let p = net
            .predict(x.view(), 5, 1, &PredictVariant::Sparse(empty))
            .unwrap();
        for s in &p.samples {
            assert!(s.iter().all(|&v| v == s[[0, 0]]));
        }
    }

    fn l1_net(lambda: f64) -> Network<f64> {
        let mut sp = spec(&[3], 2, Likelihood::Bernoulli, 1);
        sp.mode = Mode::DeterministicL1 {
            l1_lambda: lambda,
            prune_threshold: 0.005,
        };
        Network::new(sp, 17).unwrap()
    }

    #[test]
    fn l1_loss_without_penalty_is_the_nll() {
        let net = l1_net(0.0);
        let x = random_x(&mut Rng::new(5), 8, 2);
        let y = Array1::from_iter((0..8).map(|i| (i % 2) as f64));
        let mut streams = LayerStreams::new(0, Purpose::Noise, 2);
        let (p, _) = net.forward_sample(x.view(), &mut streams).unwrap();
        let nll: f64 = (0..8)
            .map(|i| -net.head().log_likelihood(p.row(i), y[i]).unwrap())
            .sum();
        assert!((net.l1_loss(x.view(), y.view()).unwrap() - nll).abs() < 1e-10);
        assert!(
            Network::<f64>::new(spec(&[3], 2, Likelihood::Bernoulli, 1), 1)
                .unwrap()
                .l1_loss(x.view(), y.view())
                .is_err()
        );
    }

    #[test]
    fn tiny_weights_prune_to_a_constant() {
        let mut net = l1_net(0.1);
        if let Layers::Dense(ls) = &mut net.layers {
            for l in ls {
                l.weight.mapv_inplace(|w| w * 1e-3);
            }
        }
        let mask = net.sparse_mask();
        assert_eq!(mask.count_ones(), 0);
        let x = random_x(&mut Rng::new(6), 5, 2);
        let p = net
            .freeze(&mask, None)
            .unwrap()
            .predict_params(x.view())
            .unwrap();
        assert!(p.iter().all(|&v| v == p[[0, 0]]));
    }

    #[test]
    fn l1_subgradient_matches_finite_differences() {
        let net = l1_net(0.3);
        let x = random_x(&mut Rng::new(7), 6, 2);
        let y = Array1::from_iter((0..6).map(|i| (i % 2) as f64));
        let (_, grad) = net.l1_loss_and_grad(x.view(), y.view()).unwrap();
        let NetworkGrad::Dense(gs) = grad else {
            unreachable!()
        };
        let h = 1e-6;
        for (j, g) in gs.iter().enumerate() {
            for b in 0..2 {
                for i in 0..g.blocks()[b].len() {
                    let perturbed = |d: f64| {
                        let mut n = net.clone();
                        if let Layers::Dense(ls) = &mut n.layers {
                            ls[j].blocks_mut()[b][i] += d;
                        }
                        n.l1_loss(x.view(), y.view()).unwrap()
                    };
                    let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
                    let a = g.blocks()[b][i];
                    assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-5);
                }
            }
        }
    }

    #[test]
    fn rejects_wrong_covariate_count() {
        let net = Network::<f64>::new(spec(&[2], 3, Likelihood::Bernoulli, 1), 1).unwrap();
        let mut streams = LayerStreams::new(0, Purpose::Noise, 2);
        assert!(net
            .forward_sample(Matrix::zeros((1, 2)).view(), &mut streams)
            .is_err());
    }
}
