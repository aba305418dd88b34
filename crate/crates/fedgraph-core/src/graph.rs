//! Model-to-graph mapping and threshold pruning.
//!
//! A model (in practice the per-client absolute delta against the global
//! model) becomes an undirected weighted graph: channels are nodes, layer
//! connections are edges, and each conv kernel collapses to one scalar edge
//! weight. Pruning then compares local and global edge weights and keeps a
//! binary edge set for the kernel stage.

use crate::error::{Error, Result};
use crate::nn::{LayerKind, ModelParams};
use crate::tensor::Tensor;

/// Undirected graph with canonical `u < v` edges, deduplicated and sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct TopoGraph {
    n_nodes: usize,
    edges: Vec<(usize, usize, f64)>,
    binary: bool,
}

impl TopoGraph {
    pub fn new(n_nodes: usize, mut edges: Vec<(usize, usize, f64)>, binary: bool) -> Result<Self> {
        edges.sort_by_key(|e| (e.0, e.1));
        for (i, &(u, v, w)) in edges.iter().enumerate() {
            if u >= v {
                return Err(Error::Internal(format!(
                    "edge ({}, {}) breaks canonical ordering",
                    u, v
                )));
            }
            if v >= n_nodes {
                return Err(Error::Internal(format!(
                    "edge ({}, {}) exceeds {} nodes",
                    u, v, n_nodes
                )));
            }
            if i > 0 && (edges[i - 1].0, edges[i - 1].1) == (u, v) {
                return Err(Error::Internal(format!("duplicate edge ({}, {})", u, v)));
            }
            if binary && w != 1.0 {
                return Err(Error::Internal(format!(
                    "binary graph holds edge weight {}",
                    w
                )));
            }
        }
        Ok(TopoGraph {
            n_nodes,
            edges,
            binary,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    /// Neighbor lists (undirected, both directions).
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for &(u, v, _) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// Same structure with every edge weight zeroed. Pruning a delta graph
    /// against this baseline thresholds the delta weights themselves.
    pub fn zero_like(&self) -> TopoGraph {
        TopoGraph {
            n_nodes: self.n_nodes,
            edges: self.edges.iter().map(|&(u, v, _)| (u, v, 0.0)).collect(),
            binary: false,
        }
    }

    /// Edge-list text dump: header `n_nodes E`, then one `u v weight` line
    /// per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{} {}\n", self.n_nodes, self.edges.len());
        for &(u, v, w) in &self.edges {
            out.push_str(&format!("{} {} {}\n", u, v, w));
        }
        out
    }
}

/// How a conv kernel's elements collapse into one edge weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scalarize {
    #[default]
    Sum,
    Mean,
}

impl Scalarize {
    fn finish(self, sum: f64, count: usize) -> f64 {
        match self {
            Scalarize::Sum => sum,
            Scalarize::Mean => sum / count as f64,
        }
    }
}

/// Collapse a whole kernel tensor to a scalar (sum by default).
pub fn scalarize_kernel(kernel: &Tensor) -> Result<f64> {
    scalarize_kernel_with(kernel, Scalarize::Sum)
}

pub fn scalarize_kernel_with(kernel: &Tensor, mode: Scalarize) -> Result<f64> {
    if kernel.is_empty() {
        return Err(Error::Config("cannot scalarize an empty kernel".into()));
    }
    Ok(mode.finish(kernel.data().iter().sum(), kernel.len()))
}

/// Map a model onto a topology graph with sum scalarization.
pub fn graph_map(delta: &ModelParams) -> Result<TopoGraph> {
    graph_map_with(delta, Scalarize::Sum)
}

/// Map a model onto a topology graph.
///
/// Every layer contributes its input channels and output channels as nodes;
/// consecutive layers share a node set when the channel counts line up.
/// Conv edges carry the scalarized spatial kernel per channel pair, dense
/// edges carry `|w_ij|`. Biases are ignored.
pub fn graph_map_with(delta: &ModelParams, mode: Scalarize) -> Result<TopoGraph> {
    if delta.layers().is_empty() {
        return Err(Error::Config("cannot map an empty model".into()));
    }
    let mut n_nodes = 0usize;
    let mut edges = Vec::new();
    // Output node range of the previous layer, for the chaining rule.
    let mut prev_out: Option<(usize, usize)> = None;

    for layer in delta.layers() {
        let (c_in, c_out) = match layer.spec.kind {
            LayerKind::Conv2d { c_in, c_out, .. } => (c_in, c_out),
            LayerKind::Dense { n_in, n_out } => (n_in, n_out),
        };
        if c_in == 0 || c_out == 0 {
            return Err(Error::Config("zero-channel layer cannot be mapped".into()));
        }
        let in_base = match prev_out {
            Some((base, count)) if count == c_in => base,
            _ => {
                let base = n_nodes;
                n_nodes += c_in;
                base
            }
        };
        let out_base = n_nodes;
        n_nodes += c_out;
        prev_out = Some((out_base, c_out));

        match layer.spec.kind {
            LayerKind::Conv2d {
                kernel_h, kernel_w, ..
            } => {
                for ci in 0..c_in {
                    for co in 0..c_out {
                        let mut sum = 0.0;
                        for kh in 0..kernel_h {
                            for kw in 0..kernel_w {
                                sum += layer.weights.at4(kh, kw, ci, co);
                            }
                        }
                        edges.push((
                            in_base + ci,
                            out_base + co,
                            mode.finish(sum, kernel_h * kernel_w),
                        ));
                    }
                }
            }
            LayerKind::Dense { .. } => {
                for i in 0..c_in {
                    for o in 0..c_out {
                        edges.push((in_base + i, out_base + o, layer.weights.at2(i, o).abs()));
                    }
                }
            }
        }
    }
    TopoGraph::new(n_nodes, edges, false)
}

/// Keep-or-drop rule applied to per-edge weight differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMode {
    /// Keep edges whose local and global weights are close (`d < delta`).
    Similarity,
    /// Keep edges whose weights moved apart (`d >= delta`).
    Dissimilarity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneThreshold {
    Fixed { delta: f64 },
    Quantile { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneConfig {
    pub mode: PruneMode,
    pub threshold: PruneThreshold,
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        match self.threshold {
            PruneThreshold::Fixed { delta } => {
                if !(delta >= 0.0) {
                    return Err(Error::Config(format!(
                        "prune delta must be >= 0, got {}",
                        delta
                    )));
                }
            }
            PruneThreshold::Quantile { lambda } => {
                if !(0.0..=1.0).contains(&lambda) {
                    return Err(Error::Config(format!(
                        "prune lambda must be in [0, 1], got {}",
                        lambda
                    )));
                }
            }
        }
        Ok(())
    }
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            mode: PruneMode::Dissimilarity,
            threshold: PruneThreshold::Fixed { delta: 0.01 },
        }
    }
}

/// Ascending-sort quantile: `sorted(diffs)[floor(lambda * len)]`, index
/// clamped to the last element when `lambda` is 1.
pub fn quantile_threshold(diffs: &[f64], lambda: f64) -> Result<f64> {
    if diffs.is_empty() {
        return Err(Error::Config("quantile of an empty list".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "quantile lambda must be in [0, 1], got {}",
            lambda
        )));
    }
    if diffs.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::Numeric(
            "quantile input must be finite and non-negative".into(),
        ));
    }
    let mut sorted = diffs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((lambda * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    Ok(sorted[idx])
}

/// Prune structurally identical local and global graphs into a binary graph.
///
/// Each edge's difference `d = |w_local - w_global|` is compared against the
/// threshold (fixed, or the quantile of this graph's own differences).
/// Similarity keeps close edges, dissimilarity keeps the complement; nodes
/// are never removed.
pub fn graph_prune(
    g_local: &TopoGraph,
    g_global: &TopoGraph,
    cfg: &PruneConfig,
) -> Result<TopoGraph> {
    cfg.validate()?;
    if g_local.n_nodes != g_global.n_nodes || g_local.edges.len() != g_global.edges.len() {
        return Err(Error::Internal(format!(
            "pruning graphs disagree: {} nodes / {} edges vs {} nodes / {} edges",
            g_local.n_nodes,
            g_local.edges.len(),
            g_global.n_nodes,
            g_global.edges.len()
        )));
    }
    let mut diffs = Vec::with_capacity(g_local.edges.len());
    for (&(u, v, wl), &(gu, gv, wg)) in g_local.edges.iter().zip(&g_global.edges) {
        if (u, v) != (gu, gv) {
            return Err(Error::Internal(format!(
                "pruning graphs disagree on edge ({}, {}) vs ({}, {})",
                u, v, gu, gv
            )));
        }
        diffs.push((wl - wg).abs());
    }
    let delta = match cfg.threshold {
        PruneThreshold::Fixed { delta } => delta,
        PruneThreshold::Quantile { lambda } => {
            if diffs.is_empty() {
                0.0
            } else {
                quantile_threshold(&diffs, lambda)?
            }
        }
    };
    let edges = g_local
        .edges
        .iter()
        .zip(&diffs)
        .filter(|(_, &d)| match cfg.mode {
            PruneMode::Similarity => d < delta,
            PruneMode::Dissimilarity => d >= delta,
        })
        .map(|(&(u, v, _), _)| (u, v, 1.0))
        .collect();
    TopoGraph::new(g_local.n_nodes, edges, true)
}
