//! Input-skip latent binary Bayesian neural networks trained by variational
//! inference.
//!
//! Each weight carries a Gaussian slab and a Bernoulli inclusion indicator.
//! Training samples Gaussian pre-activations directly (local
//! reparameterization); the sparse model keeps edges with inclusion
//! probability above one half, and only edges on covariate-to-output paths
//! are counted as used. Piecewise-linear networks expose exact local linear
//! explanations.
//!
//! The numeric core is generic over [`Real`] (`f64` or `f32`); the aliases at
//! the crate root fix it to `f64`.

pub mod data;
pub mod error;
pub mod experiment;
pub mod explain;
pub mod layer;
pub mod math;
pub mod metrics;
pub mod model_file;
pub mod network;
pub mod rng;
pub mod scalar;
pub mod structure;
pub mod train;

pub use error::{Error, Result};
pub use layer::{DenseLayer, LayerInit, LayerPrior, VariationalLayer};
pub use network::{
    Activation, FrozenNetwork, Head, Likelihood, Mode, Network, NetworkSpec, PredictVariant,
    Predictive,
};
pub use rng::{LayerStreams, Purpose, Rng};
pub use scalar::Real;
pub use structure::{active_paths, ActivePathGraph, LayerMask, PathSummary, StructureMask};
pub use train::{train, TrainConfig, TrainLog};

pub type Network64 = Network<f64>;
pub type Network32 = Network<f32>;
pub type VariationalLayer64 = VariationalLayer<f64>;
pub type Matrix64 = math::Matrix<f64>;
pub type Vector64 = math::Vector<f64>;
