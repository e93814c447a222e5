//! Inclusion masks, active paths and contribution depths.
//!
//! An edge is on an active path when it is included, its source is reachable
//! from some covariate (covariate columns are roots in every layer), and its
//! target reaches an output node. Bias terms never start a path.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sigmoid, Matrix};
use crate::network::{Layers, Network};
use crate::rng::LayerStreams;
use crate::scalar::Real;

/// Which node feeds a given weight column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeOrigin {
    Hidden(usize),
    Covariate(usize),
}

/// Binary inclusion matrix for one layer, row-major `(n_out, n_in)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    n_out: usize,
    n_in: usize,
    hidden_inputs: usize,
    bits: Vec<bool>,
}

impl LayerMask {
    pub fn empty(n_out: usize, n_in: usize, hidden_inputs: usize) -> Self {
        assert!(hidden_inputs <= n_in, "hidden_inputs exceeds layer width");
        Self {
            n_out,
            n_in,
            hidden_inputs,
            bits: vec![false; n_out * n_in],
        }
    }

    pub fn full(n_out: usize, n_in: usize, hidden_inputs: usize) -> Self {
        let mut m = Self::empty(n_out, n_in, hidden_inputs);
        m.bits.fill(true);
        m
    }

    pub fn from_fn(
        n_out: usize,
        n_in: usize,
        hidden_inputs: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Self {
        let mut m = Self::empty(n_out, n_in, hidden_inputs);
        for p in 0..n_out {
            for k in 0..n_in {
                m.bits[p * n_in + k] = f(p, k);
            }
        }
        m
    }

    pub fn get(&self, p: usize, k: usize) -> bool {
        self.bits[p * self.n_in + k]
    }

    pub fn set(&mut self, p: usize, k: usize, on: bool) {
        self.bits[p * self.n_in + k] = on;
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.n_out, self.n_in)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn hidden_inputs(&self) -> usize {
        self.hidden_inputs
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn origin(&self, k: usize) -> EdgeOrigin {
        if k < self.hidden_inputs {
            EdgeOrigin::Hidden(k)
        } else {
            EdgeOrigin::Covariate(k - self.hidden_inputs)
        }
    }

    /// 0.0 / 1.0 matrix, handy for elementwise products.
    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n_out, self.n_in), |(p, k)| {
            if self.get(p, k) {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Per-layer inclusion masks of a whole network (the matrix of indicators).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureMask {
    pub layers: Vec<LayerMask>,
}

impl StructureMask {
    pub fn new(layers: Vec<LayerMask>) -> Self {
        Self { layers }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn count_ones(&self) -> usize {
        self.layers.iter().map(LayerMask::count_ones).sum()
    }

    pub fn total_edges(&self) -> usize {
        self.layers.iter().map(LayerMask::len).sum()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().map_or(0, LayerMask::n_out)
    }

    pub fn n_covariates(&self) -> usize {
        self.layers
            .first()
            .map_or(0, |l| l.n_in() - l.hidden_inputs())
    }

    /// Mask keeping exactly the edges of `graph`.
    pub fn from_graph(graph: &ActivePathGraph) -> Self {
        graph.kept.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub used_weights: usize,
    pub total_weights: usize,
    pub density: f64,
    pub max_depth: usize,
    pub avg_depth: f64,
    pub inclusion: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivePathGraph {
    /// Edges lying on at least one covariate-to-output path.
    pub kept: StructureMask,
    /// `active_nodes[l][p]` for every layer's units (the last entry is the output layer).
    pub active_nodes: Vec<Vec<bool>>,
    /// `depths[i]`: contribution depths of covariate `i`, one value per entry layer.
    pub depths: Vec<BTreeSet<usize>>,
    pub n_layers: usize,
}

impl ActivePathGraph {
    pub fn used_weights(&self) -> usize {
        self.kept.count_ones()
    }

    pub fn density(&self) -> f64 {
        let total = self.kept.total_edges();
        if total == 0 {
            0.0
        } else {
            self.used_weights() as f64 / total as f64
        }
    }

    pub fn summary(&self) -> PathSummary {
        let (max_depth, avg_depth) = self.depth_summary();
        PathSummary {
            used_weights: self.used_weights(),
            total_weights: self.kept.total_edges(),
            density: self.density(),
            max_depth,
            avg_depth,
            inclusion: covariate_inclusion(self),
        }
    }

    fn depth_summary(&self) -> (usize, f64) {
        let (max, avg, _) = depth_metrics(self);
        (max, avg)
    }
}

/// Median probability model: edges with `alpha > 0.5`. Biases are always kept.
pub fn extract_mpm<T: Real>(net: &Network<T>) -> Result<StructureMask> {
    if !net.is_variational() {
        return Err(Error::InvalidArgument(
            "the median probability model needs a variational network".into(),
        ));
    }
    Ok(net.sparse_mask())
}

/// One draw `gamma ~ Bernoulli(alpha)` for every edge, from per-layer streams.
pub fn sample_structure<T: Real>(
    net: &Network<T>,
    streams: &mut LayerStreams,
) -> Result<StructureMask> {
    let layers = net.variational_layers().ok_or_else(|| {
        Error::InvalidArgument("structure sampling needs a variational network".into())
    })?;
    if streams.len() < layers.len() {
        return Err(Error::dim("structure streams", layers.len(), streams.len()));
    }
    Ok(StructureMask::new(
        layers
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let rng = streams.layer(j);
                LayerMask::from_fn(l.n_out(), l.n_in(), l.hidden_inputs(), |p, k| {
                    rng.bernoulli(sigmoid(l.lambda[[p, k]]).as_f64())
                })
            })
            .collect(),
    ))
}

/// Computes active paths to every output node.
pub fn active_paths(mask: &StructureMask) -> ActivePathGraph {
    let all: Vec<usize> = (0..mask.n_outputs()).collect();
    active_paths_to(mask, &all)
}

/// Active paths restricted to the given output nodes.
pub fn active_paths_to(mask: &StructureMask, outputs: &[usize]) -> ActivePathGraph {
    let n_layers = mask.n_layers();
    let v = mask.n_covariates();
    if n_layers == 0 {
        return ActivePathGraph {
            kept: mask.clone(),
            active_nodes: Vec::new(),
            depths: vec![BTreeSet::new(); v],
            n_layers,
        };
    }

    // forward sweep: units fed (directly or not) by some covariate
    let mut fwd: Vec<Vec<bool>> = Vec::with_capacity(n_layers);
    for (l, lm) in mask.layers.iter().enumerate() {
        let reach: Vec<bool> = (0..lm.n_out())
            .map(|p| {
                (0..lm.n_in()).any(|k| {
                    lm.get(p, k)
                        && match lm.origin(k) {
                            EdgeOrigin::Covariate(_) => true,
                            EdgeOrigin::Hidden(h) => fwd[l - 1][h],
                        }
                })
            })
            .collect();
        fwd.push(reach);
    }

    // backward sweep: units that reach a selected output
    let mut bwd: Vec<Vec<bool>> = vec![Vec::new(); n_layers];
    let last = n_layers - 1;
    bwd[last] = vec![false; mask.layers[last].n_out()];
    for &o in outputs {
        if o < bwd[last].len() {
            bwd[last][o] = true;
        }
    }
    for l in (0..last).rev() {
        let next = &mask.layers[l + 1];
        let width = mask.layers[l].n_out();
        let reach: Vec<bool> = (0..width)
            .map(|p| (0..next.n_out()).any(|q| bwd[l + 1][q] && next.get(q, p)))
            .collect();
        bwd[l] = reach;
    }

    let mut kept_layers = Vec::with_capacity(n_layers);
    let mut depths = vec![BTreeSet::new(); v];
    for (l, lm) in mask.layers.iter().enumerate() {
        let kept = LayerMask::from_fn(lm.n_out(), lm.n_in(), lm.hidden_inputs(), |p, k| {
            lm.get(p, k)
                && bwd[l][p]
                && match lm.origin(k) {
                    EdgeOrigin::Covariate(_) => true,
                    EdgeOrigin::Hidden(h) => fwd[l - 1][h],
                }
        });
        for p in 0..kept.n_out() {
            for k in kept.hidden_inputs()..kept.n_in() {
                if kept.get(p, k) {
                    depths[k - kept.hidden_inputs()].insert(n_layers - l);
                }
            }
        }
        kept_layers.push(kept);
    }

    let active_nodes = (0..n_layers)
        .map(|l| fwd[l].iter().zip(&bwd[l]).map(|(&f, &b)| f && b).collect())
        .collect();

    ActivePathGraph {
        kept: StructureMask::new(kept_layers),
        active_nodes,
        depths,
        n_layers,
    }
}

/// `(max_depth, avg_depth, per-covariate depth sets)`.
///
/// Each (covariate, entry layer) pair contributes its depth once to the
/// average. A graph without active paths yields `(0, 0.0)`.
pub fn depth_metrics(graph: &ActivePathGraph) -> (usize, f64, Vec<BTreeSet<usize>>) {
    let all: Vec<usize> = graph.depths.iter().flatten().copied().collect();
    if all.is_empty() {
        return (0, 0.0, graph.depths.clone());
    }
    let max = *all.iter().max().expect("non-empty");
    let avg = all.iter().sum::<usize>() as f64 / all.len() as f64;
    (max, avg, graph.depths.clone())
}

pub fn covariate_inclusion(graph: &ActivePathGraph) -> Vec<bool> {
    graph.depths.iter().map(|d| !d.is_empty()).collect()
}

/// Edge annotations for exports: inclusion probabilities (variational models)
/// and weight values (posterior means or point estimates).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgeLabels {
    pub alpha: Option<Vec<Array2<f64>>>,
    pub weight: Vec<Array2<f64>>,
}

impl EdgeLabels {
    pub fn from_network<T: Real>(net: &Network<T>) -> Self {
        let f = |m: &Matrix<T>| m.mapv(|v| v.as_f64());
        match &net.layers {
            Layers::Variational(ls) => Self {
                alpha: Some(ls.iter().map(|l| f(&l.alpha())).collect()),
                weight: ls.iter().map(|l| f(&l.mu)).collect(),
            },
            Layers::Dense(ls) => Self {
                alpha: None,
                weight: ls.iter().map(|l| f(&l.weight)).collect(),
            },
        }
    }
}

#[derive(Serialize)]
struct JsonEdge {
    layer: usize,
    source: String,
    target: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    weight: f64,
}

#[derive(Serialize)]
struct JsonGraph<'a> {
    nodes: Vec<String>,
    edges: Vec<JsonEdge>,
    summary: PathSummary,
    depths: &'a [BTreeSet<usize>],
}

fn source_name(lm: &LayerMask, layer: usize, k: usize) -> String {
    match lm.origin(k) {
        EdgeOrigin::Covariate(i) => format!("x{}", i + 1),
        EdgeOrigin::Hidden(h) => format!("h{}_{}", layer, h + 1),
    }
}

fn target_name(n_layers: usize, layer: usize, p: usize) -> String {
    if layer + 1 == n_layers {
        format!("out{}", p + 1)
    } else {
        format!("h{}_{}", layer + 1, p + 1)
    }
}

fn edge_list(graph: &ActivePathGraph, labels: &EdgeLabels) -> Vec<JsonEdge> {
    let mut edges = Vec::new();
    for (l, lm) in graph.kept.layers.iter().enumerate() {
        for p in 0..lm.n_out() {
            for k in 0..lm.n_in() {
                if !lm.get(p, k) {
                    continue;
                }
                edges.push(JsonEdge {
                    layer: l + 1,
                    source: source_name(lm, l, k),
                    target: target_name(graph.n_layers, l, p),
                    alpha: labels.alpha.as_ref().map(|a| a[l][[p, k]]),
                    weight: labels.weight.get(l).map_or(f64::NAN, |w| w[[p, k]]),
                });
            }
        }
    }
    edges
}

fn node_list(edges: &[JsonEdge]) -> Vec<String> {
    let mut nodes = BTreeSet::new();
    for e in edges {
        nodes.insert(e.source.clone());
        nodes.insert(e.target.clone());
    }
    nodes.into_iter().collect()
}

/// JSON document with nodes, labelled edges, and the depth summary.
pub fn to_json(graph: &ActivePathGraph, labels: &EdgeLabels) -> serde_json::Value {
    let edges = edge_list(graph, labels);
    let doc = JsonGraph {
        nodes: node_list(&edges),
        edges,
        summary: graph.summary(),
        depths: &graph.depths,
    };
    serde_json::to_value(doc).expect("graph serializes")
}

/// Graphviz rendering of the active paths; edges carry `α=…` when inclusion
/// probabilities are known and `w=…` otherwise.
pub fn to_dot(graph: &ActivePathGraph, labels: &EdgeLabels) -> String {
    let edges = edge_list(graph, labels);
    let mut out = String::from("digraph active_paths {\n  rankdir=LR;\n");
    for n in node_list(&edges) {
        let shape = if n.starts_with('x') {
            "box"
        } else if n.starts_with("out") {
            "doublecircle"
        } else {
            "circle"
        };
        let _ = writeln!(out, "  \"{n}\" [shape={shape}];");
    }
    for e in &edges {
        let label = match e.alpha {
            Some(a) => format!("α={a:.2}"),
            None => format!("w={:.3}", e.weight),
        };
        let _ = writeln!(
            out,
            "  \"{}\" -> \"{}\" [label=\"{}\"];",
            e.source, e.target, label
        );
    }
    out.push_str("}\n");
    out
}
