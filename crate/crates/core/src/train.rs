//! Minibatch Adam on the negative ELBO (variational mode) or the L1
//! objective (deterministic mode).
//!
//! Each epoch shuffles the training rows and splits them into
//! `iters_per_epoch` contiguous batches. A batch step minimizes
//! `sum_batch NLL + KL / iters_per_epoch`, so one epoch spends the KL exactly
//! once.

use std::path::Path;
use std::time::Instant;

use ndarray::{ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{class_index, Layers, Likelihood, Network, NetworkGrad};
use crate::rng::{LayerStreams, Purpose, Rng};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn default_mc_samples() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub seed: u64,
    #[serde(default = "default_mc_samples")]
    pub n_train_mc_samples: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.iters_per_epoch == 0 {
            return bad("iters_per_epoch must be at least 1".into());
        }
        if self.n_train_mc_samples == 0 {
            return bad("n_train_mc_samples must be at least 1".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        Ok(())
    }
}

/// Adam moments for a flat list of parameter blocks.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Real> AdamState<T> {
    pub fn new(cfg: AdamConfig, block_sizes: &[usize]) -> Self {
        Self {
            cfg,
            m: block_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: block_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }
}

/// One bias-corrected Adam update of every block.
pub fn adam_step<T: Real>(
    state: &mut AdamState<T>,
    params: &mut [&mut [T]],
    grads: &[&[T]],
    lr: T,
) {
    assert_eq!(params.len(), state.m.len(), "parameter block count");
    assert_eq!(grads.len(), state.m.len(), "gradient block count");
    state.t += 1;
    let (b1, b2) = (T::of(state.cfg.beta1), T::of(state.cfg.beta2));
    let eps = T::of(state.cfg.eps);
    let c1 = T::one() - b1.powi(state.t);
    let c2 = T::one() - b2.powi(state.t);
    let step = lr / c1;
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        assert_eq!(p.len(), g.len(), "gradient block length");
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            p[i] -= step * m[i] / ((v[i] / c2).sqrt() + eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Summed batch objectives: negative ELBO estimate, or NLL plus penalties.
    pub loss: f64,
    pub nll: f64,
    /// KL at the end of the epoch (zero in L1 mode).
    pub kl: f64,
    /// Accuracy (classification) or RMSE (regression) of the sampled training outputs.
    pub train_metric: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub metric_name: String,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "epoch",
            "loss",
            "nll",
            "kl",
            self.metric_name.as_str(),
            "seconds",
        ])?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.loss.to_string(),
                r.nll.to_string(),
                r.kl.to_string(),
                r.train_metric.to_string(),
                format!("{:.3}", r.seconds),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn param_blocks<T: Real>(net: &mut Network<T>) -> Vec<&mut [T]> {
    match &mut net.layers {
        Layers::Variational(ls) => ls.iter_mut().flat_map(|l| l.blocks_mut()).collect(),
        Layers::Dense(ls) => ls.iter_mut().flat_map(|l| l.blocks_mut()).collect(),
    }
}

fn grad_blocks<T: Real>(g: &NetworkGrad<T>) -> Vec<&[T]> {
    match g {
        NetworkGrad::Variational(gs) => gs.iter().flat_map(|l| l.blocks()).collect(),
        NetworkGrad::Dense(gs) => gs.iter().flat_map(|l| l.blocks()).collect(),
    }
}

fn add_scaled<T: Real>(acc: &mut NetworkGrad<T>, g: &NetworkGrad<T>, scale: T) {
    let dst: Vec<&mut [T]> = match acc {
        NetworkGrad::Variational(gs) => gs
            .iter_mut()
            .flat_map(|l| {
                [
                    l.mu.as_slice_mut().expect("standard layout"),
                    l.rho.as_slice_mut().expect("standard layout"),
                    l.lambda.as_slice_mut().expect("standard layout"),
                    l.bias_mu.as_slice_mut().expect("standard layout"),
                    l.bias_rho.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect(),
        NetworkGrad::Dense(gs) => gs
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect(),
    };
    for (d, s) in dst.into_iter().zip(grad_blocks(g)) {
        for (a, &b) in d.iter_mut().zip(s) {
            *a += scale * b;
        }
    }
}

/// Tracks the per-epoch training metric from sampled outputs.
struct MetricAcc {
    likelihood: Likelihood,
    correct: usize,
    sq_err: f64,
    n: usize,
}

impl MetricAcc {
    fn add<T: Real>(&mut self, logits: &ndarray::Array2<T>, y: ArrayView1<'_, f64>) -> Result<()> {
        for (row, &yi) in logits.rows().into_iter().zip(y.iter()) {
            match self.likelihood {
                Likelihood::Bernoulli => {
                    let pred = if row[0] > T::zero() { 1.0 } else { 0.0 };
                    self.correct += usize::from(pred == yi);
                }
                Likelihood::Categorical => {
                    let class = class_index(yi, row.len())?;
                    let best = argmax(row.iter().map(|v| v.as_f64()));
                    self.correct += usize::from(best == class);
                }
                Likelihood::Gaussian => self.sq_err += (row[0].as_f64() - yi).powi(2),
            }
            self.n += 1;
        }
        Ok(())
    }

    fn value(&self) -> f64 {
        match self.likelihood {
            Likelihood::Gaussian => (self.sq_err / self.n as f64).sqrt(),
            _ => self.correct as f64 / self.n as f64,
        }
    }
}

pub(crate) fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in xs.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Trains `net` in place and returns the per-epoch log.
pub fn train<T: Real>(
    net: &mut Network<T>,
    x: ArrayView2<'_, T>,
    y: ArrayView1<'_, f64>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_with(net, x, y, cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with<T: Real>(
    net: &mut Network<T>,
    x: ArrayView2<'_, T>,
    y: ArrayView1<'_, f64>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if y.len() != n {
        return Err(Error::dim("training targets", n, y.len()));
    }
    if x.ncols() != net.spec.n_covariates {
        return Err(Error::dim("covariates", net.spec.n_covariates, x.ncols()));
    }
    let ipe = cfg.iters_per_epoch.min(n);
    let n_layers = net.n_layers();
    let head = net.head();
    let prior = net.spec.prior;
    let kl_weight = T::of(1.0 / ipe as f64);
    let mc = cfg.n_train_mc_samples;
    let lr = T::of(cfg.lr);

    let sizes: Vec<usize> = param_blocks(net).iter().map(|b| b.len()).collect();
    let mut adam = AdamState::new(cfg.adam, &sizes);
    let mut noise = LayerStreams::new(cfg.seed, Purpose::Noise, n_layers);
    let mut shuffle = Rng::substream(cfg.seed, Purpose::Shuffle, 0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog {
        metric_name: match head.likelihood {
            Likelihood::Gaussian => "train_rmse".into(),
            _ => "train_acc".into(),
        },
        epochs: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        shuffle.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut nll_sum = 0.0;
        let mut kl = 0.0;
        let mut metric = MetricAcc {
            likelihood: head.likelihood,
            correct: 0,
            sq_err: 0.0,
            n: 0,
        };
        for b in 0..ipe {
            let rows = &order[b * n / ipe..(b + 1) * n / ipe];
            let xb = x.select(Axis(0), rows);
            let yb = y.select(Axis(0), rows);
            let (batch_loss, batch_nll, grad) = match net.layers {
                Layers::Variational(_) => {
                    let mut total: Option<NetworkGrad<T>> = None;
                    let mut nll = 0.0;
                    let scale = T::of(1.0 / mc as f64);
                    for s in 0..mc {
                        let (_, cache) = net.forward_sample(xb.view(), &mut noise)?;
                        if s == 0 {
                            metric.add(&cache.logits, yb.view())?;
                        }
                        let (l, g) = head.nll_and_grad(&cache.logits, yb.view())?;
                        nll += l / mc as f64;
                        let g = net.backward(&cache, &g)?;
                        match total.as_mut() {
                            None if mc == 1 => total = Some(g),
                            None => {
                                let mut z = g.clone();
                                scale_in_place(&mut z, scale);
                                total = Some(z);
                            }
                            Some(acc) => add_scaled(acc, &g, scale),
                        }
                    }
                    let mut grad = total.expect("at least one sample");
                    let mut kl_now = 0.0;
                    if let (NetworkGrad::Variational(gs), Layers::Variational(ls)) =
                        (&mut grad, &net.layers)
                    {
                        for (g, l) in gs.iter_mut().zip(ls) {
                            kl_now += l.accumulate_kl_grad(&prior, kl_weight, g).as_f64();
                        }
                    }
                    kl = kl_now;
                    (nll + kl_now / ipe as f64, nll, grad)
                }
                Layers::Dense(_) => {
                    let (l, nll, logits, g) = net.l1_step(xb.view(), yb.view())?;
                    metric.add(&logits, yb.view())?;
                    (l, nll, g)
                }
            };
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: b,
                    detail: format!("batch loss {batch_loss} (nll {batch_nll}, kl {kl})"),
                });
            }
            loss_sum += batch_loss;
            nll_sum += batch_nll;
            let grads = grad_blocks(&grad);
            let mut params = param_blocks(net);
            adam_step(&mut adam, &mut params, &grads, lr);
        }
        net.check_finite().map_err(|e| Error::Diverged {
            epoch,
            step: ipe,
            detail: e.to_string(),
        })?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum,
            nll: nll_sum,
            kl: if net.is_variational() {
                net.total_kl().as_f64()
            } else {
                kl
            },
            train_metric: metric.value(),
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.epochs.push(record);
    }
    Ok(log)
}

fn scale_in_place<T: Real>(g: &mut NetworkGrad<T>, s: T) {
    match g {
        NetworkGrad::Variational(gs) => gs.iter_mut().for_each(|l| {
            l.mu *= s;
            l.rho *= s;
            l.lambda *= s;
            l.bias_mu *= s;
            l.bias_rho *= s;
        }),
        NetworkGrad::Dense(gs) => gs.iter_mut().for_each(|l| {
            l.weight *= s;
            l.bias *= s;
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{LayerInit, LayerPrior};
    use crate::network::{Activation, Head, Mode, NetworkSpec, PredictVariant};
    use ndarray::{Array1, Array2};

    fn spec(widths: &[usize], v: usize, mode: Mode) -> NetworkSpec {
        NetworkSpec {
            n_covariates: v,
            hidden_widths: widths.to_vec(),
            n_outputs: 1,
            activation: Activation::Sigmoid,
            head: Head {
                likelihood: Likelihood::Bernoulli,
                phi: 1.0,
            },
            mode,
            prior: LayerPrior::new(2.5, 0.1).unwrap(),
            init: LayerInit {
                sigma: 0.05,
                lambda_hidden: (-1.0, 1.0),
                lambda_covariate: (0.0, 1.0),
            },
        }
    }

    fn cfg(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            lr,
            epochs,
            iters_per_epoch: 4,
            seed: 11,
            n_train_mc_samples: 1,
            adam: AdamConfig::default(),
        }
    }

    /// 1-D separable data with a margin around zero: label is `x > 0`.
    fn separable(n: usize) -> (Array2<f64>, Array1<f64>) {
        let x = Array2::from_shape_fn((n, 1), |(i, _)| {
            let u = (i as f64 + 0.5) / n as f64;
            if u < 0.5 {
                -1.0 + 1.8 * u
            } else {
                0.1 + 1.8 * (u - 0.5)
            }
        });
        let y = x.column(0).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        (x, y)
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut w = vec![1.5, -2.0];
        let mut st = AdamState::<f64>::new(AdamConfig::default(), &[2]);
        for _ in 0..5 {
            adam_step(&mut st, &mut [&mut w[..]], &[&[0.0, 0.0][..]], 0.1);
        }
        assert_eq!(w, vec![1.5, -2.0]);
        assert_eq!(st.steps(), 5);
    }

    #[test]
    fn adam_first_step_has_length_lr() {
        for g in [1e-3, 0.5, 40.0] {
            let mut w = [0.0];
            let mut st = AdamState::<f64>::new(AdamConfig::default(), &[1]);
            adam_step(&mut st, &mut [&mut w[..]], &[&[g][..]], 0.01);
            // m_hat = g, v_hat = g^2
            let expect = -0.01 * g / (g + 1e-8);
            assert!((w[0] - expect).abs() < 1e-12, "{} vs {}", w[0], expect);
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut w = [0.0];
        let mut st = AdamState::<f64>::new(AdamConfig::default(), &[1]);
        for _ in 0..200 {
            let g = 2.0 * (w[0] - 3.0);
            adam_step(&mut st, &mut [&mut w[..]], &[&[g][..]], 0.1);
        }
        assert!((w[0] - 3.0).abs() < 0.05, "w = {}", w[0]);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (x, y) = separable(40);
        let mut net = Network::<f64>::new(spec(&[3], 1, Mode::Variational), 4).unwrap();
        let before = net.clone();
        let log = train(&mut net, x.view(), y.view(), &cfg(0.0, 3)).unwrap();
        assert_eq!(log.epochs.len(), 3);
        assert_eq!(net, before);
    }

    #[test]
    fn blr_learns_separable_data() {
        let (x, y) = separable(1000);
        let mut net = Network::<f64>::new(spec(&[], 1, Mode::Variational), 4).unwrap();
        let mut c = cfg(0.05, 100);
        c.iters_per_epoch = 10;
        let log = train(&mut net, x.view(), y.view(), &c).unwrap();
        assert!(log.epochs[0].loss > log.epochs.last().unwrap().loss);
        let sparse = PredictVariant::Sparse(net.sparse_mask());
        let p = net.predict(x.view(), 20, 3, &sparse).unwrap().mean();
        let acc = p
            .column(0)
            .iter()
            .zip(y.iter())
            .filter(|(&p, &t)| (p > 0.5) == (t == 1.0))
            .count() as f64
            / y.len() as f64;
        assert!(acc >= 0.99, "sparse train acc {acc}");
    }

    #[test]
    fn training_is_deterministic_given_seeds() {
        let (x, y) = separable(60);
        let run = || {
            let mut net = Network::<f64>::new(spec(&[4, 3], 1, Mode::Variational), 8).unwrap();
            let log = train(&mut net, x.view(), y.view(), &cfg(0.01, 4)).unwrap();
            (net, log.epochs.iter().map(|r| r.loss).collect::<Vec<_>>())
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn one_epoch_spends_the_kl_once() {
        // With a single-sample, zero-lr epoch the logged loss is the summed
        // batch NLL plus exactly one KL.
        let (x, y) = separable(50);
        let mut net = Network::<f64>::new(spec(&[3], 1, Mode::Variational), 2).unwrap();
        let log = train(&mut net, x.view(), y.view(), &cfg(0.0, 1)).unwrap();
        let r = &log.epochs[0];
        let kl = net.total_kl();
        assert!((r.kl - kl).abs() < 1e-12);
        assert!((r.loss - (r.nll + kl)).abs() < 1e-9 * r.loss.abs().max(1.0));
    }

    #[test]
    fn l1_training_reduces_the_objective() {
        let (x, y) = separable(100);
        let mode = Mode::DeterministicL1 {
            l1_lambda: 1e-3,
            prune_threshold: 1e-3,
        };
        let mut net = Network::<f64>::new(spec(&[4], 1, mode), 5).unwrap();
        let log = train(&mut net, x.view(), y.view(), &cfg(0.05, 100)).unwrap();
        assert!(log.epochs[0].loss > log.epochs.last().unwrap().loss);
        assert!(log.epochs.last().unwrap().train_metric > 0.95);
        assert!(log.epochs.iter().all(|r| r.kl == 0.0));
    }

    #[test]
    fn averaging_samples_matches_single_sample_at_zero_noise() {
        let (x, y) = separable(30);
        let mut s = spec(&[3], 1, Mode::Variational);
        s.init.sigma = 1e-12;
        s.init.lambda_covariate = (40.0, 40.0);
        s.init.lambda_hidden = (40.0, 40.0);
        let mut a = Network::<f64>::new(s.clone(), 1).unwrap();
        let mut b = a.clone();
        let mut c1 = cfg(0.01, 2);
        c1.iters_per_epoch = 1;
        let mut c3 = c1.clone();
        c3.n_train_mc_samples = 3;
        train(&mut a, x.view(), y.view(), &c1).unwrap();
        train(&mut b, x.view(), y.view(), &c3).unwrap();
        for (la, lb) in a
            .variational_layers()
            .unwrap()
            .iter()
            .zip(b.variational_layers().unwrap())
        {
            for (p, q) in la.mu.iter().zip(lb.mu.iter()) {
                assert!((p - q).abs() < 1e-6, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (x, y) = separable(10);
        let mut net = Network::<f64>::new(spec(&[], 1, Mode::Variational), 4).unwrap();
        assert!(train(&mut net, x.view(), y.slice(ndarray::s![..5]), &cfg(0.1, 1)).is_err());
        assert!(train(&mut net, x.view(), y.view(), &cfg(-0.1, 1)).is_err());
        assert!(train(&mut net, x.view(), y.view(), &cfg(f64::NAN, 1)).is_err());
        assert!(train(&mut net, x.view(), y.view(), &cfg(0.1, 0)).is_err());
    }

    #[test]
    fn huge_learning_rate_reports_divergence_instead_of_nan() {
        let (x, y) = separable(40);
        let mut net = Network::<f64>::new(spec(&[3], 1, Mode::Variational), 4).unwrap();
        match train(&mut net, x.view(), y.view(), &cfg(1e300, 5)) {
            Err(Error::Diverged { .. }) | Ok(_) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn train_log_csv() {
        let dir = tempfile::tempdir().unwrap();
        let log = TrainLog {
            metric_name: "train_acc".into(),
            epochs: vec![EpochRecord {
                epoch: 0,
                loss: 1.5,
                nll: 1.0,
                kl: 0.5,
                train_metric: 0.75,
                seconds: 0.01,
            }],
        };
        let p = dir.path().join("log.csv");
        log.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "epoch,loss,nll,kl,train_acc,seconds"
        );
        assert!(text
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("0,1.5,1,0.5,0.75,"));
    }
}
