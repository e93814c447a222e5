//! Experiment driver behind the command line: JSON configs, per-seed
//! training runs, evaluation tables, structure exports and explanations.
//!
//! Run `k` of a config uses seed `base_seed + k` for initialization, noise,
//! batching, prediction and (unless pinned) data generation, and writes
//! `{name}_seed{seed}.model` plus `{name}_seed{seed}_log.csv` to the output
//! directory.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{self, ConstantColumn, Dataset, Synthetic, Task};
use crate::error::{Error, Result};
use crate::explain::{explain_with_uncertainty, global_explain, ExplanationReport};
use crate::layer::{LayerInit, LayerPrior};
use crate::metrics::{
    aggregate, default_pinball_taus, evaluate, format_value, write_results_csv, EvalOptions,
    ResultRow, TargetScale, Variant, DEFAULT_ECE_BINS,
};
use crate::model_file::AnyNetwork;
use crate::network::{Activation, Head, Likelihood, Mode, Network, NetworkSpec, PredictVariant};
use crate::scalar::Real;
use crate::structure::active_paths;
use crate::train::{train_with, AdamConfig, EpochRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Tag used in every output file name.
    pub name: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSettings,
    #[serde(default = "one")]
    pub n_seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Monte Carlo draws for predictions and explanations.
    #[serde(default = "hundred")]
    pub eval_samples: usize,
    #[serde(default = "default_ece_bins")]
    pub ece_bins: usize,
    #[serde(default = "default_pinball_taus")]
    pub pinball_taus: Vec<f64>,
    #[serde(default)]
    pub dtype: Dtype,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn one() -> usize {
    1
}

fn hundred() -> usize {
    100
}

fn default_ece_bins() -> usize {
    DEFAULT_ECE_BINS
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    #[default]
    None,
    Minmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        generator: Synthetic,
        n_train: usize,
        n_test: usize,
        #[serde(default)]
        rho: f64,
        /// Fixed data seed; by default every run draws fresh data from its own seed.
        #[serde(default)]
        data_seed: Option<u64>,
    },
    Csv {
        train: PathBuf,
        /// Separate test file; without one the training file is split.
        #[serde(default)]
        test: Option<PathBuf>,
        target: String,
        task: Task,
        #[serde(default)]
        n_train: Option<usize>,
        #[serde(default)]
        scale: Scaling,
        #[serde(default)]
        constant_columns: ConstantColumn,
        /// Regression: train on standardized targets, report on the original scale.
        #[serde(default)]
        standardize_target: bool,
        #[serde(default)]
        split_seed: Option<u64>,
    },
}

impl DatasetConfig {
    pub fn label(&self) -> String {
        match self {
            DatasetConfig::Synthetic { generator, rho, .. } => {
                let g = match generator {
                    Synthetic::Linear => "linear",
                    Synthetic::Nonlinear => "nonlinear",
                };
                format!("{g}_rho{rho}")
            }
            DatasetConfig::Csv { train, .. } => train
                .file_stem()
                .map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    IslabLrt,
    Blr,
    IsAnnL1,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::IslabLrt => "islab_lrt",
            ModelKind::Blr => "blr",
            ModelKind::IsAnnL1 => "is_ann_l1",
        }
    }
}

fn default_phi() -> f64 {
    1.0
}

fn default_prune() -> f64 {
    0.005
}

fn default_activation() -> Activation {
    Activation::Sigmoid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden_widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub likelihood: Likelihood,
    #[serde(default = "default_phi")]
    pub phi: f64,
    #[serde(default)]
    pub prior_std: Option<f64>,
    #[serde(default)]
    pub psi: Option<f64>,
    #[serde(default)]
    pub init: Option<LayerInit>,
    #[serde(default)]
    pub l1_lambda: Option<f64>,
    #[serde(default = "default_prune")]
    pub prune_threshold: f64,
}

fn default_mc() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub lr: f64,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    #[serde(default = "default_mc")]
    pub n_train_mc_samples: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainSettings {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            iters_per_epoch: self.iters_per_epoch,
            seed,
            n_train_mc_samples: self.n_train_mc_samples,
            adam: self.adam,
        }
    }
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses a JSON document; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Config {
                field: if path == "." { "<root>".into() } else { path },
                message: format!("{inner} (line {}, column {})", inner.line(), inner.column()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        cfg.check_files()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        if let DatasetConfig::Csv { train, test, .. } = &mut self.dataset {
            if train.is_relative() {
                *train = dir.join(&*train);
            }
            if let Some(t) = test.as_mut().filter(|t| t.is_relative()) {
                *t = dir.join(&*t);
            }
        }
    }

    /// Referenced data files must exist.
    pub fn check_files(&self) -> Result<()> {
        if let DatasetConfig::Csv { train, test, .. } = &self.dataset {
            if !train.is_file() {
                return Err(config_err(
                    "dataset.train",
                    format!("no such file: {}", train.display()),
                ));
            }
            if let Some(t) = test.as_ref().filter(|t| !t.is_file()) {
                return Err(config_err(
                    "dataset.test",
                    format!("no such file: {}", t.display()),
                ));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(config_err("name", "must be a non-empty file-name tag"));
        }
        if self.n_seeds == 0 {
            return Err(config_err("n_seeds", "must be at least 1"));
        }
        if self.eval_samples == 0 {
            return Err(config_err("eval_samples", "must be at least 1"));
        }
        if self.ece_bins == 0 {
            return Err(config_err("ece_bins", "must be at least 1"));
        }
        if self.pinball_taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(config_err("pinball_taus", "levels must lie in (0, 1)"));
        }
        self.train
            .with_seed(0)
            .validate()
            .map_err(|e| config_err("train", e.to_string()))?;
        let task = match &self.dataset {
            DatasetConfig::Synthetic {
                n_train,
                n_test,
                rho,
                ..
            } => {
                if *n_train < 1 || *n_test < 1 {
                    return Err(config_err("dataset", "n_train and n_test must be positive"));
                }
                if !(0.0..=1.0).contains(rho) {
                    return Err(config_err("dataset.rho", "must lie in [0, 1]"));
                }
                Task::Binary
            }
            DatasetConfig::Csv {
                task,
                test,
                n_train,
                standardize_target,
                ..
            } => {
                if test.is_none() && n_train.is_none() {
                    return Err(config_err(
                        "dataset.n_train",
                        "required when no test file is given",
                    ));
                }
                if *standardize_target && *task != Task::Regression {
                    return Err(config_err(
                        "dataset.standardize_target",
                        "only applies to regression",
                    ));
                }
                *task
            }
        };
        let expected = match task {
            Task::Binary => Likelihood::Bernoulli,
            Task::Multiclass { .. } => Likelihood::Categorical,
            Task::Regression => Likelihood::Gaussian,
        };
        if self.model.likelihood != expected {
            return Err(config_err(
                "model.likelihood",
                format!("{:?} does not fit a {:?} task", self.model.likelihood, task),
            ));
        }
        // the remaining architecture checks need the covariate count
        self.network_spec(1, task).map(|_| ())
    }

    /// Network spec for `v` covariates.
    pub fn network_spec(&self, v: usize, task: Task) -> Result<NetworkSpec> {
        let m = &self.model;
        let n_outputs = match task {
            Task::Multiclass { n_classes } => n_classes,
            _ => 1,
        };
        let hidden_widths = match m.kind {
            ModelKind::Blr if !m.hidden_widths.is_empty() => {
                return Err(config_err(
                    "model.hidden_widths",
                    "blr has no hidden layers",
                ));
            }
            ModelKind::Blr => Vec::new(),
            _ => m.hidden_widths.clone(),
        };
        let (mode, prior) = match m.kind {
            ModelKind::IslabLrt | ModelKind::Blr => {
                let tau = m.prior_std.ok_or_else(|| {
                    config_err("model.prior_std", "required for variational models")
                })?;
                let psi = m
                    .psi
                    .ok_or_else(|| config_err("model.psi", "required for variational models"))?;
                let prior = LayerPrior::new(tau, psi)
                    .map_err(|e| config_err("model.prior_std", e.to_string()))?;
                (Mode::Variational, prior)
            }
            ModelKind::IsAnnL1 => {
                let l1_lambda = m
                    .l1_lambda
                    .ok_or_else(|| config_err("model.l1_lambda", "required for is_ann_l1"))?;
                let prior = LayerPrior::new(1.0, 0.5).expect("valid placeholder prior");
                (
                    Mode::DeterministicL1 {
                        l1_lambda,
                        prune_threshold: m.prune_threshold,
                    },
                    prior,
                )
            }
        };
        let spec = NetworkSpec {
            n_covariates: v,
            hidden_widths,
            n_outputs,
            activation: m.activation,
            head: Head {
                likelihood: m.likelihood,
                phi: m.phi,
            },
            mode,
            prior,
            init: m.init.unwrap_or_default(),
        };
        spec.validate()
            .map_err(|e| config_err("model", e.to_string()))?;
        Ok(spec)
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.n_seeds as u64).map(move |k| self.base_seed + k)
    }

    pub fn model_path(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("{}_seed{seed}.model", self.name))
    }

    pub fn log_path(&self, seed: u64) -> PathBuf {
        self.out_dir
            .join(format!("{}_seed{seed}_log.csv", self.name))
    }

    pub fn results_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}_results.csv", self.name))
    }

    fn eval_options(&self, seed: u64, target_scale: TargetScale) -> EvalOptions {
        EvalOptions {
            n_samples: self.eval_samples,
            seed,
            ece_bins: self.ece_bins,
            pinball_taus: self.pinball_taus.clone(),
            target_scale,
        }
    }
}

/// Train/test data of one run, on the scale the network sees. Test targets
/// stay on the original scale.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: Dataset,
    pub test: Dataset,
    pub target_scale: TargetScale,
}

/// Data loaded once per config; [`DataSource::run`] derives each seed's split.
#[derive(Clone, Debug)]
pub enum DataSource {
    Synthetic {
        generator: Synthetic,
        n_train: usize,
        n_test: usize,
        rho: f64,
        data_seed: Option<u64>,
    },
    Csv {
        train: Dataset,
        test: Option<Dataset>,
        n_train: Option<usize>,
        scale: Scaling,
        constant_columns: ConstantColumn,
        standardize_target: bool,
        split_seed: Option<u64>,
    },
}

impl DataSource {
    pub fn load(cfg: &DatasetConfig) -> Result<Self> {
        Ok(match cfg.clone() {
            DatasetConfig::Synthetic {
                generator,
                n_train,
                n_test,
                rho,
                data_seed,
            } => DataSource::Synthetic {
                generator,
                n_train,
                n_test,
                rho,
                data_seed,
            },
            DatasetConfig::Csv {
                train,
                test,
                target,
                task,
                n_train,
                scale,
                constant_columns,
                standardize_target,
                split_seed,
            } => {
                let train_ds = data::load_csv(&train, &target, task)?;
                let test_ds = test
                    .map(|t| data::load_csv(&t, &target, task))
                    .transpose()?;
                if let Some(t) = &test_ds {
                    if t.columns != train_ds.columns {
                        return Err(Error::Data(
                            "train and test files have different columns".into(),
                        ));
                    }
                }
                DataSource::Csv {
                    train: train_ds,
                    test: test_ds,
                    n_train,
                    scale,
                    constant_columns,
                    standardize_target,
                    split_seed,
                }
            }
        })
    }

    pub fn task(&self) -> Task {
        match self {
            DataSource::Synthetic { .. } => Task::Binary,
            DataSource::Csv { train, .. } => train.task,
        }
    }

    pub fn run(&self, seed: u64) -> Result<RunData> {
        match self {
            DataSource::Synthetic {
                generator,
                n_train,
                n_test,
                rho,
                data_seed,
            } => {
                let s = data_seed.unwrap_or(seed);
                let ds = data::generate(*generator, n_train + n_test, *rho, s, Default::default())?;
                let (train, test) = data::split(&ds, *n_train, s)?;
                Ok(RunData {
                    train,
                    test,
                    target_scale: TargetScale::IDENTITY,
                })
            }
            DataSource::Csv {
                train,
                test,
                n_train,
                scale,
                constant_columns,
                standardize_target,
                split_seed,
            } => {
                let (mut tr, mut te) = match (test, n_train) {
                    (Some(t), None) => (train.clone(), t.clone()),
                    (Some(t), Some(n)) => {
                        let idx: Vec<usize> =
                            data::split_indices(train.n(), *n, split_seed.unwrap_or(seed)).0;
                        (train.subset(&idx), t.clone())
                    }
                    (None, Some(n)) => data::split(train, *n, split_seed.unwrap_or(seed))?,
                    (None, None) => unreachable!("validated config"),
                };
                if *scale == Scaling::Minmax {
                    let (scaled, rec) = data::minmax_scale(&tr, *constant_columns)?;
                    te.x = rec.apply(&te.x)?;
                    te.columns = scaled.columns.clone();
                    te.scaling = Some(rec);
                    tr = scaled;
                }
                let mut target_scale = TargetScale::IDENTITY;
                if *standardize_target {
                    let mean = tr.y.mean().expect("non-empty");
                    let std = tr.y.std(0.0);
                    if !(std > 0.0) {
                        return Err(Error::Data("constant regression target".into()));
                    }
                    tr.y.mapv_inplace(|v| (v - mean) / std);
                    target_scale = TargetScale { mean, std };
                }
                Ok(RunData {
                    train: tr,
                    test: te,
                    target_scale,
                })
            }
        }
    }
}

fn cast<T: Real>(x: &Array2<f64>) -> Array2<T> {
    x.mapv(T::of)
}

/// Progress events from long-running commands.
#[derive(Clone, Debug)]
pub enum Event<'a> {
    RunStarted { seed: u64, n_train: usize },
    Epoch { seed: u64, record: &'a EpochRecord },
    Saved { path: &'a Path },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub models: Vec<PathBuf>,
    pub logs: Vec<PathBuf>,
}

fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Trains one model per seed and writes model files and training logs.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    mut on_event: impl FnMut(Event<'_>),
) -> Result<TrainOutcome> {
    create_out_dir(&cfg.out_dir)?;
    let source = DataSource::load(&cfg.dataset)?;
    let mut out = TrainOutcome {
        models: Vec::new(),
        logs: Vec::new(),
    };
    for seed in cfg.seeds() {
        let run = source.run(seed)?;
        on_event(Event::RunStarted {
            seed,
            n_train: run.train.n(),
        });
        let spec = cfg.network_spec(run.train.n_covariates(), run.train.task)?;
        let bytes = match cfg.dtype {
            Dtype::F64 => train_one::<f64>(cfg, spec, &run, seed, &mut on_event)?,
            Dtype::F32 => train_one::<f32>(cfg, spec, &run, seed, &mut on_event)?,
        };
        let path = cfg.model_path(seed);
        std::fs::write(&path, &bytes.0).map_err(|e| Error::io(&path, e))?;
        on_event(Event::Saved { path: &path });
        let log = cfg.log_path(seed);
        bytes.1.write_csv(&log)?;
        out.models.push(path);
        out.logs.push(log);
    }
    Ok(out)
}

fn train_one<T: Real>(
    cfg: &ExperimentConfig,
    spec: NetworkSpec,
    run: &RunData,
    seed: u64,
    on_event: &mut impl FnMut(Event<'_>),
) -> Result<(Vec<u8>, crate::train::TrainLog)> {
    let mut net = Network::<T>::new(spec, seed)?;
    let x = cast::<T>(&run.train.x);
    let log = train_with(
        &mut net,
        x.view(),
        run.train.y.view(),
        &cfg.train.with_seed(seed),
        |r| on_event(Event::Epoch { seed, record: r }),
    )?;
    Ok((net.to_bytes(), log))
}

/// Metrics of one trained model on its run's test set: task metrics for the
/// full and sparse networks plus structure metrics of the sparse one.
pub fn eval_model(
    cfg: &ExperimentConfig,
    net: &AnyNetwork,
    run: &RunData,
    seed: u64,
) -> Result<Vec<(Variant, String, f64)>> {
    match net {
        AnyNetwork::F64(n) => eval_generic(cfg, n, run, seed),
        AnyNetwork::F32(n) => eval_generic(cfg, n, run, seed),
    }
}

fn eval_generic<T: Real>(
    cfg: &ExperimentConfig,
    net: &Network<T>,
    run: &RunData,
    seed: u64,
) -> Result<Vec<(Variant, String, f64)>> {
    let x = cast::<T>(&run.test.x);
    let opts = cfg.eval_options(seed, run.target_scale);
    let mask = net.sparse_mask();
    let mut rows = Vec::new();
    for (variant, pv) in [
        (Variant::Full, PredictVariant::Full),
        (Variant::Sparse, PredictVariant::Sparse(mask.clone())),
    ] {
        for (m, v) in evaluate(net, x.view(), run.test.y.view(), &pv, &opts)? {
            rows.push((variant, m, v));
        }
    }
    let summary = active_paths(&mask).summary();
    let s = Variant::Sparse;
    rows.push((s, "used_weights".into(), summary.used_weights as f64));
    rows.push((s, "total_weights".into(), summary.total_weights as f64));
    rows.push((s, "density".into(), summary.density));
    rows.push((s, "avg_depth".into(), summary.avg_depth));
    rows.push((s, "max_depth".into(), summary.max_depth as f64));
    for (name, inc) in run.train.columns.iter().zip(&summary.inclusion) {
        rows.push((s, format!("included_{name}"), if *inc { 1.0 } else { 0.0 }));
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub rows: Vec<ResultRow>,
    pub path: PathBuf,
}

impl EvalOutcome {
    /// Per-seed values of `metric` for `variant`, in seed order.
    pub fn values(&self, variant: Variant, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| {
                r.variant == variant.name() && r.metric == metric && r.seed != AGGREGATE_SEED
            })
            .map(|r| r.value.parse().expect("per-seed values are numbers"))
            .collect()
    }

    /// The `median (min, max)` cell of `metric`.
    pub fn aggregate(&self, variant: Variant, metric: &str) -> Option<&str> {
        self.rows
            .iter()
            .find(|r| r.variant == variant.name() && r.metric == metric && r.seed == AGGREGATE_SEED)
            .map(|r| r.value.as_str())
    }
}

/// `seed` column of aggregate rows.
pub const AGGREGATE_SEED: &str = "median (min, max)";

/// Evaluates every seed's model and writes `{name}_results.csv`. `models`
/// overrides the default model paths (one per seed, in seed order).
pub fn cmd_eval(cfg: &ExperimentConfig, models: Option<&[PathBuf]>) -> Result<EvalOutcome> {
    create_out_dir(&cfg.out_dir)?;
    let source = DataSource::load(&cfg.dataset)?;
    let seeds: Vec<u64> = cfg.seeds().collect();
    let paths: Vec<PathBuf> = match models {
        Some(p) if p.len() != seeds.len() => {
            return Err(Error::InvalidArgument(format!(
                "{} model files given for {} seeds",
                p.len(),
                seeds.len()
            )))
        }
        Some(p) => p.to_vec(),
        None => seeds.iter().map(|&s| cfg.model_path(s)).collect(),
    };
    let dataset = cfg.dataset.label();
    let model = cfg.model.kind.name().to_string();
    let mut rows = Vec::new();
    let mut per_metric: Vec<((Variant, String), Vec<f64>)> = Vec::new();
    for (&seed, path) in seeds.iter().zip(&paths) {
        let net = AnyNetwork::load(path)?;
        let run = source.run(seed)?;
        let expected = cfg.network_spec(run.train.n_covariates(), source.task())?;
        if net.spec() != &expected {
            return Err(Error::InvalidArgument(format!(
                "{} does not match the configured model",
                path.display()
            )));
        }
        for (variant, metric, value) in eval_model(cfg, &net, &run, seed)? {
            rows.push(ResultRow {
                dataset: dataset.clone(),
                model: model.clone(),
                variant: variant.name().into(),
                metric: metric.clone(),
                value: format_value(value),
                seed: seed.to_string(),
            });
            let key = (variant, metric);
            match per_metric.iter_mut().find(|(k, _)| *k == key) {
                Some((_, vs)) => vs.push(value),
                None => per_metric.push((key, vec![value])),
            }
        }
    }
    for ((variant, metric), values) in per_metric {
        rows.push(ResultRow {
            dataset: dataset.clone(),
            model: model.clone(),
            variant: variant.name().into(),
            metric,
            value: aggregate(&values).expect("at least one seed"),
            seed: AGGREGATE_SEED.into(),
        });
    }
    let path = cfg.results_path();
    write_results_csv(&path, &rows)?;
    Ok(EvalOutcome { rows, path })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathsOutcome {
    pub dot: PathBuf,
    pub json: PathBuf,
    pub maps: PathBuf,
    pub used_weights: usize,
}

fn stem(model: &Path) -> String {
    model
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

/// Writes the sparse model's active-path graph (DOT and JSON) and its
/// per-output covariate maps.
pub fn cmd_paths(model: &Path, out_dir: &Path, covariates: &[String]) -> Result<PathsOutcome> {
    create_out_dir(out_dir)?;
    let g = match AnyNetwork::load(model)? {
        AnyNetwork::F64(n) => global_explain(&n)?,
        AnyNetwork::F32(n) => global_explain(&n)?,
    };
    let base = stem(model);
    let dot = out_dir.join(format!("{base}_paths.dot"));
    let json = out_dir.join(format!("{base}_paths.json"));
    let maps = out_dir.join(format!("{base}_maps.csv"));
    std::fs::write(&dot, g.to_dot()).map_err(|e| Error::io(&dot, e))?;
    let text = serde_json::to_string_pretty(&g.to_json())?;
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    g.write_maps_csv(&maps, covariates)?;
    Ok(PathsOutcome {
        dot,
        json,
        maps,
        used_weights: g.graph.used_weights(),
    })
}

/// Local explanation of one input row with `n` posterior weight draws.
pub fn cmd_explain(
    model: &Path,
    x: &[f64],
    n: usize,
    seed: u64,
    covariates: &[String],
) -> Result<ExplanationReport> {
    let x = Array1::from(x.to_vec());
    match AnyNetwork::load(model)? {
        AnyNetwork::F64(net) => explain_with_uncertainty(&net, x.view(), n, seed, covariates),
        AnyNetwork::F32(net) => {
            explain_with_uncertainty(&net, x.mapv(|v| v as f32).view(), n, seed, covariates)
        }
    }
}

/// Writes the train and test sets of run `seed` as CSV.
pub fn cmd_gen_data(cfg: &ExperimentConfig, seed: u64) -> Result<(PathBuf, PathBuf)> {
    create_out_dir(&cfg.out_dir)?;
    let run = DataSource::load(&cfg.dataset)?.run(seed)?;
    let train = cfg
        .out_dir
        .join(format!("{}_seed{seed}_train.csv", cfg.name));
    let test = cfg
        .out_dir
        .join(format!("{}_seed{seed}_test.csv", cfg.name));
    run.train.write_csv(&train)?;
    run.test.write_csv(&test)?;
    Ok((train, test))
}

/// Row `i` of run `seed`'s test set (covariates on the network's scale).
pub fn test_row(cfg: &ExperimentConfig, seed: u64, i: usize) -> Result<(Vec<f64>, Vec<String>)> {
    let run = DataSource::load(&cfg.dataset)?.run(seed)?;
    if i >= run.test.n() {
        return Err(Error::InvalidArgument(format!(
            "row {i} out of range ({} test rows)",
            run.test.n()
        )));
    }
    Ok((
        run.test.x.index_axis(Axis(0), i).to_vec(),
        run.test.columns.clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINEAR: &str = r#"{
        "name": "lin",
        "dataset": {"kind": "synthetic", "generator": "linear", "n_train": 300, "n_test": 100},
        "model": {
            "kind": "islab_lrt", "hidden_widths": [3], "likelihood": "bernoulli",
            "prior_std": 2.5, "psi": 0.1,
            "init": {"sigma": 0.05, "lambda_hidden": [-2.0, 0.0], "lambda_covariate": [3.0, 3.0]}
        },
        "train": {"lr": 0.05, "epochs": 3, "iters_per_epoch": 3},
        "n_seeds": 2,
        "eval_samples": 5
    }"#;

    fn with_out(text: &str, dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::from_json(text).unwrap();
        cfg.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn config_errors_name_the_field() {
        let bad = LINEAR.replace("\"bernoulli\"", "\"poisson\"");
        match ExperimentConfig::from_json(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.likelihood"),
            other => panic!("expected a config error, got {other:?}"),
        }
        let bad = LINEAR.replace("\"n_seeds\": 2", "\"n_seeds\": 0");
        assert!(
            matches!(ExperimentConfig::from_json(&bad), Err(Error::Config { field, .. }) if field == "n_seeds")
        );
        let bad = LINEAR.replace("\"kind\": \"islab_lrt\"", "\"kind\": \"blr\"");
        assert!(
            matches!(ExperimentConfig::from_json(&bad), Err(Error::Config { field, .. }) if field == "model.hidden_widths")
        );
        let bad = LINEAR.replace("\"psi\": 0.1", "\"psi\": 1.5");
        assert!(ExperimentConfig::from_json(&bad).unwrap_err().is_config());
        let bad = LINEAR.replace("\"eval_samples\"", "\"eval_sample\"");
        assert!(ExperimentConfig::from_json(&bad).unwrap_err().is_config());
        let bad = LINEAR.replace(
            "\"likelihood\": \"bernoulli\"",
            "\"likelihood\": \"gaussian\"",
        );
        assert!(
            matches!(ExperimentConfig::from_json(&bad), Err(Error::Config { field, .. }) if field == "model.likelihood")
        );
    }

    #[test]
    fn missing_csv_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(
            &p,
            r#"{"name": "c", "dataset": {"kind": "csv", "train": "nope.csv", "target": "y", "task": {"kind": "binary"}, "n_train": 2},
                "model": {"kind": "blr", "likelihood": "bernoulli", "prior_std": 1.0, "psi": 0.5},
                "train": {"lr": 0.1, "epochs": 1, "iters_per_epoch": 1}}"#,
        )
        .unwrap();
        match ExperimentConfig::from_path(&p) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "dataset.train"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn train_eval_round_trip_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = with_out(LINEAR, dir.path());
        let mut epochs = 0;
        let t = cmd_train(&cfg, |e| {
            if let Event::Epoch { .. } = e {
                epochs += 1
            }
        })
        .unwrap();
        assert_eq!(epochs, 6);
        assert_eq!(
            t.models,
            vec![
                dir.path().join("lin_seed0.model"),
                dir.path().join("lin_seed1.model")
            ]
        );
        let first: Vec<Vec<u8>> = t.models.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let e1 = cmd_eval(&cfg, None).unwrap();
        let bytes1 = std::fs::read(&e1.path).unwrap();

        cmd_train(&cfg, |_| {}).unwrap();
        let again: Vec<Vec<u8>> = t.models.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(first, again);
        let e2 = cmd_eval(&cfg, None).unwrap();
        assert_eq!(bytes1, std::fs::read(&e2.path).unwrap());

        assert_eq!(e1.values(Variant::Sparse, "acc").len(), 2);
        assert!(e1.aggregate(Variant::Full, "acc").is_some());
        assert!(e1.aggregate(Variant::Sparse, "used_weights").is_some());
        assert_eq!(e1.values(Variant::Sparse, "included_x4").len(), 2);
        let header = String::from_utf8(bytes1).unwrap();
        assert!(header.starts_with("dataset,model,variant,metric,value,seed\n"));
    }

    #[test]
    fn constant_model_scores_the_majority_rate() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = with_out(LINEAR, dir.path());
        let source = DataSource::load(&cfg.dataset).unwrap();
        let run = source.run(0).unwrap();
        let spec = cfg.network_spec(4, Task::Binary).unwrap();
        let mut net = Network::<f64>::new(spec, 0).unwrap();
        if let crate::network::Layers::Variational(ls) = &mut net.layers {
            for l in ls.iter_mut() {
                l.lambda.fill(-30.0);
                l.rho.fill(-30.0);
                l.bias_rho.fill(-30.0);
            }
            ls.last_mut().unwrap().bias_mu.fill(2.0);
        }
        let rows = eval_model(&cfg, &AnyNetwork::F64(net), &run, 0).unwrap();
        let acc = rows
            .iter()
            .find(|r| r.0 == Variant::Sparse && r.1 == "acc")
            .unwrap()
            .2;
        let majority = run.test.y.mean().unwrap();
        assert!((acc - majority).abs() < 1e-12);
        let used = rows.iter().find(|r| r.1 == "used_weights").unwrap().2;
        assert_eq!(used, 0.0);
    }

    #[test]
    fn blr_reports_depth_one() {
        let dir = tempfile::tempdir().unwrap();
        let text = LINEAR
            .replace("\"islab_lrt\", \"hidden_widths\": [3]", "\"blr\"")
            .replace("\"n_seeds\": 2", "\"n_seeds\": 1");
        let cfg = with_out(&text, dir.path());
        cmd_train(&cfg, |_| {}).unwrap();
        let e = cmd_eval(&cfg, None).unwrap();
        let used = e.values(Variant::Sparse, "used_weights")[0];
        if used > 0.0 {
            assert_eq!(e.values(Variant::Sparse, "max_depth"), vec![1.0]);
        }
    }

    #[test]
    fn paths_and_explain_commands() {
        let dir = tempfile::tempdir().unwrap();
        let text = LINEAR
            .replace("\"likelihood\"", "\"activation\": \"relu\", \"likelihood\"")
            .replace("\"n_seeds\": 2", "\"n_seeds\": 1");
        let cfg = with_out(&text, dir.path());
        let t = cmd_train(&cfg, |_| {}).unwrap();
        let p = cmd_paths(&t.models[0], dir.path(), &[]).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&p.json).unwrap()).unwrap();
        assert_eq!(json["edges"].as_array().unwrap().len(), p.used_weights);
        let e = cmd_eval(&cfg, None).unwrap();
        assert_eq!(
            e.values(Variant::Sparse, "used_weights"),
            vec![p.used_weights as f64]
        );
        let dot = std::fs::read_to_string(&p.dot).unwrap();
        assert_eq!(dot.matches("->").count(), p.used_weights);

        let (x, names) = test_row(&cfg, 0, 3).unwrap();
        let r = cmd_explain(&t.models[0], &x, 50, 1, &names).unwrap();
        assert!(r.max_reconstruction_error() < 1e-8);
        assert_eq!(r.covariates, names);
    }

    #[test]
    fn sigmoid_models_cannot_be_explained_locally() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = with_out(
            &LINEAR.replace("\"n_seeds\": 2", "\"n_seeds\": 1"),
            dir.path(),
        );
        let t = cmd_train(&cfg, |_| {}).unwrap();
        let err = cmd_explain(&t.models[0], &[1.0, 2.0, 3.0, 4.0], 5, 0, &[]).unwrap_err();
        assert!(matches!(err, Error::NotPiecewiseLinear(_)));
        assert!(err
            .to_string()
            .contains("piecewise-linear activation required"));
    }

    #[test]
    fn csv_source_with_scaling_and_standardized_target() {
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join("train.csv");
        let mut text = String::from("a,b,y\n");
        for i in 0..20 {
            text.push_str(&format!("{},{},{}\n", i, 2 * i % 7, 3.0 * i as f64 + 1.0));
        }
        std::fs::write(&train, text).unwrap();
        let cfg_text = format!(
            r#"{{"name": "reg", "dataset": {{"kind": "csv", "train": "{}", "target": "y", "task": {{"kind": "regression"}},
                 "n_train": 15, "scale": "minmax", "standardize_target": true}},
                "model": {{"kind": "blr", "likelihood": "gaussian", "prior_std": 5.0, "psi": 0.5}},
                "train": {{"lr": 0.05, "epochs": 40, "iters_per_epoch": 1}}, "eval_samples": 20}}"#,
            train.display()
        );
        let mut cfg = ExperimentConfig::from_json(&cfg_text).unwrap();
        cfg.out_dir = dir.path().to_path_buf();
        let run = DataSource::load(&cfg.dataset).unwrap().run(0).unwrap();
        assert_eq!(run.train.n(), 15);
        assert!(run.train.x.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(run.train.y.mean().unwrap().abs() < 1e-12);
        assert!(run.test.y.iter().all(|v| *v >= 1.0));
        cmd_train(&cfg, |_| {}).unwrap();
        let e = cmd_eval(&cfg, None).unwrap();
        for m in ["rmse", "corr", "nll", "pinball"] {
            assert_eq!(e.values(Variant::Full, m).len(), 1, "{m}");
        }
    }

    #[test]
    fn gen_data_writes_both_splits() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = with_out(LINEAR, dir.path());
        let (tr, te) = cmd_gen_data(&cfg, 4).unwrap();
        let tr_ds = data::load_csv(&tr, "y", Task::Binary).unwrap();
        let te_ds = data::load_csv(&te, "y", Task::Binary).unwrap();
        assert_eq!((tr_ds.n(), te_ds.n()), (300, 100));
        let run = DataSource::load(&cfg.dataset).unwrap().run(4).unwrap();
        assert_eq!(tr_ds.x, run.train.x);
    }

    #[test]
    fn eval_rejects_mismatched_models() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = with_out(
            &LINEAR.replace("\"n_seeds\": 2", "\"n_seeds\": 1"),
            dir.path(),
        );
        cmd_train(&cfg, |_| {}).unwrap();
        let other = with_out(
            &LINEAR
                .replace("\"n_seeds\": 2", "\"n_seeds\": 1")
                .replace("[3]", "[4]"),
            dir.path(),
        );
        assert!(cmd_eval(&other, None).is_err());
        assert!(cmd_eval(&cfg, Some(&[])).is_err());
    }
}
