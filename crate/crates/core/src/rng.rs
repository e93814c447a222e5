//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the run seed, with the ChaCha
//! stream id selecting an independent substream. A layer's noise therefore
//! depends only on `(seed, purpose, layer index)`, never on how many other
//! layers exist or how many draws they consumed.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a substream is used for. Distinct purposes never share draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Init,
    Noise,
    Shuffle,
    WeightSample,
    StructureSample,
    Data,
    Split,
    Predict,
    Explain,
    Custom(u32),
}

impl Purpose {
    fn code(self) -> u64 {
        match self {
            Purpose::Init => 1,
            Purpose::Noise => 2,
            Purpose::Shuffle => 3,
            Purpose::WeightSample => 4,
            Purpose::StructureSample => 5,
            Purpose::Data => 6,
            Purpose::Split => 7,
            Purpose::Predict => 8,
            Purpose::Explain => 9,
            Purpose::Custom(c) => 0x1_0000 + c as u64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent substream `index` of `purpose` under `seed`.
    pub fn substream(seed: u64, purpose: Purpose, index: u32) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream((purpose.code() << 32) | index as u64);
        Self { inner }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform on `[lo, hi)`; returns `lo` when the range is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random::<f64>() < p
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// One substream per layer, for a single worker.
#[derive(Clone, Debug)]
pub struct LayerStreams {
    streams: Vec<Rng>,
}

impl LayerStreams {
    pub fn new(seed: u64, purpose: Purpose, n_layers: usize) -> Self {
        Self {
            streams: (0..n_layers)
                .map(|j| Rng::substream(seed, purpose, j as u32))
                .collect(),
        }
    }

    pub fn layer(&mut self, j: usize) -> &mut Rng {
        &mut self.streams[j]
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }
}
