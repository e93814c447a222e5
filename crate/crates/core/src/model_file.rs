//! Binary model files.
//!
//! Layout: the 8-byte magic `ISLABNET`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header (spec, dtype,
//! seed, layer shapes), then every parameter block as raw little-endian
//! floats in layer order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{DenseLayer, VariationalLayer};
use crate::math::Vector;
use crate::network::{Layers, Network, NetworkSpec};
use crate::scalar::Real;

pub const MAGIC: &[u8; 8] = b"ISLABNET";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    seed: u64,
    spec: NetworkSpec,
    layers: Vec<LayerShape>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct LayerShape {
    n_out: usize,
    n_in: usize,
    hidden_inputs: usize,
}

impl<T: Real> Network<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let shapes = (0..self.n_layers())
            .map(|j| {
                let (n_out, hidden_inputs) = self.spec.layer_shape(j);
                LayerShape {
                    n_out,
                    n_in: hidden_inputs + self.spec.n_covariates,
                    hidden_inputs,
                }
            })
            .collect();
        let header = Header {
            dtype: T::DTYPE.into(),
            seed: self.seed,
            spec: self.spec.clone(),
            layers: shapes,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |block: &[T]| block.iter().for_each(|v| v.write_le(&mut out));
        match &self.layers {
            Layers::Variational(ls) => ls
                .iter()
                .for_each(|l| l.blocks().into_iter().for_each(&mut put)),
            Layers::Dense(ls) => ls.iter().for_each(|l| {
                put(l.weight.as_slice().expect("standard layout"));
                put(l.bias.as_slice().expect("standard layout"));
            }),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::ModelFormat(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a model file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(bad(format!(
                "file stores {} parameters, expected {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let mut reader = FloatReader {
            data: &body[hlen..],
        };
        let spec = header.spec;
        let variational = spec.mode == crate::network::Mode::Variational;
        let mut vls = Vec::new();
        let mut dls = Vec::new();
        for s in &header.layers {
            let m = |r: &mut FloatReader<'_>| r.matrix::<T>(s.n_out, s.n_in);
            if variational {
                let (mu, rho, lambda) = (m(&mut reader)?, m(&mut reader)?, m(&mut reader)?);
                let bias_mu = reader.vector(s.n_out)?;
                let bias_rho = reader.vector(s.n_out)?;
                vls.push(VariationalLayer::from_parts(
                    mu,
                    rho,
                    lambda,
                    bias_mu,
                    bias_rho,
                    s.hidden_inputs,
                )?);
            } else {
                let weight = m(&mut reader)?;
                let bias = reader.vector(s.n_out)?;
                dls.push(DenseLayer::from_parts(weight, bias, s.hidden_inputs)?);
            }
        }
        if !reader.data.is_empty() {
            return Err(bad(format!("{} trailing bytes", reader.data.len())));
        }
        let layers = if variational {
            Layers::Variational(vls)
        } else {
            Layers::Dense(dls)
        };
        Network::from_layers(spec, layers, header.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::ModelFormat(m) => Error::ModelFormat(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Parameter precision stored in a model file, read from its header.
pub fn stored_dtype(bytes: &[u8]) -> Result<String> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::ModelFormat("not a model file (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| Error::ModelFormat("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::ModelFormat(format!("header: {e}")))?;
    Ok(header.dtype)
}

/// A loaded network of either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyNetwork {
    F64(Network<f64>),
    F32(Network<f32>),
}

impl AnyNetwork {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match stored_dtype(bytes)?.as_str() {
            "f64" => Network::from_bytes(bytes).map(AnyNetwork::F64),
            "f32" => Network::from_bytes(bytes).map(AnyNetwork::F32),
            other => Err(Error::ModelFormat(format!("unknown dtype `{other}`"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::ModelFormat(m) => Error::ModelFormat(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        match self {
            AnyNetwork::F64(n) => &n.spec,
            AnyNetwork::F32(n) => &n.spec,
        }
    }
}

struct FloatReader<'a> {
    data: &'a [u8],
}

impl FloatReader<'_> {
    fn take<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let need = n * T::BYTES;
        if self.data.len() < need {
            return Err(Error::ModelFormat("truncated parameter data".into()));
        }
        let (head, rest) = self.data.split_at(need);
        self.data = rest;
        Ok(head.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    fn matrix<T: Real>(&mut self, r: usize, c: usize) -> Result<Array2<T>> {
        Ok(Array2::from_shape_vec((r, c), self.take(r * c)?).expect("length matches shape"))
    }

    fn vector<T: Real>(&mut self, n: usize) -> Result<Vector<T>> {
        Ok(Vector::from(self.take(n)?))
    }
}
