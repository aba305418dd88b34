//! Pyramid match graph kernel and the pairwise gravity matrix.
//!
//! Pruned client graphs are compared by embedding nodes with adjacency
//! eigenvectors, bucketing the embeddings into multi-resolution histograms
//! over the unit hypercube, and telescoping histogram intersections across
//! levels. The K×K matrix of kernel values feeds the topology factor of the
//! aggregation weights.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::graph::TopoGraph;

/// Eigenvalues this close to zero are treated as zero: their eigenvectors
/// span solver-dependent null space and carry no structure.
const EIGEN_ZERO_TOL: f64 = 1e-9;

/// Per-node points in [0, 1]^d.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbedding {
    d: usize,
    rows: Vec<Vec<f64>>,
}

impl NodeEmbedding {
    pub fn new(d: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("embedding dimension must be >= 1".into()));
        }
        for row in &rows {
            if row.len() != d {
                return Err(Error::Internal(format!(
                    "embedding row has {} coordinates, expected {}",
                    row.len(),
                    d
                )));
            }
            if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::Internal(
                    "embedding coordinate outside [0, 1]".into(),
                ));
            }
        }
        Ok(NodeEmbedding { d, rows })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_nodes(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Embed each node as the absolute components of the top-d adjacency
/// eigenvectors, ranked by |eigenvalue| descending.
///
/// Zero eigenvalues are skipped: their eigenvectors are an arbitrary basis
/// of the null space, so an edgeless graph embeds every node at the origin.
/// Ties in |eigenvalue| are ordered by comparing the absolute component
/// vectors lexicographically. Missing columns (n_nodes < d or a thin
/// spectrum) are zero-padded.
pub fn embed_nodes(g: &TopoGraph, d: usize) -> Result<NodeEmbedding> {
    if d == 0 {
        return Err(Error::Config("embedding dimension must be >= 1".into()));
    }
    let n = g.n_nodes();
    if n == 0 {
        return NodeEmbedding::new(d, Vec::new());
    }
    let mut adj = DMatrix::<f64>::zeros(n, n);
    for &(u, v, _) in g.edges() {
        adj[(u, v)] = 1.0;
        adj[(v, u)] = 1.0;
    }
    let eig = SymmetricEigen::new(adj);

    // Columns as |component| vectors, keyed for deterministic ordering.
    let mut cols: Vec<(f64, Vec<f64>)> = (0..n)
        .filter(|&j| eig.eigenvalues[j].abs() > EIGEN_ZERO_TOL)
        .map(|j| {
            let abs_col: Vec<f64> = (0..n).map(|i| eig.eigenvectors[(i, j)].abs()).collect();
            (eig.eigenvalues[j].abs(), abs_col)
        })
        .collect();
    cols.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then_with(|| a.1.partial_cmp(&b.1).unwrap())
    });
    cols.truncate(d);

    let rows = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = cols.iter().map(|(_, col)| col[i].min(1.0)).collect();
            row.resize(d, 0.0);
            row
        })
        .collect();
    NodeEmbedding::new(d, rows)
}

/// Sparse multi-resolution histograms over [0, 1]^d, levels 0..=L.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidHistogram {
    d: usize,
    levels: Vec<HashMap<Vec<u32>, u64>>,
}

impl PyramidHistogram {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &HashMap<Vec<u32>, u64> {
        &self.levels[l]
    }

    pub fn total(&self, l: usize) -> u64 {
        self.levels[l].values().sum()
    }
}

/// Bucket the embedding at every level: level l splits each dimension into
/// 2^l cells, and a coordinate of exactly 1.0 lands in the last cell.
pub fn build_pyramid(e: &NodeEmbedding, levels: usize) -> PyramidHistogram {
    let mut out = Vec::with_capacity(levels + 1);
    for l in 0..=levels {
        let cells_per_dim = 1u32 << l;
        let mut map: HashMap<Vec<u32>, u64> = HashMap::new();
        for row in e.rows() {
            let key: Vec<u32> = row
                .iter()
                .map(|&x| ((x * cells_per_dim as f64).floor() as u32).min(cells_per_dim - 1))
                .collect();
            *map.entry(key).or_insert(0) += 1;
        }
        out.push(map);
    }
    PyramidHistogram {
        d: e.d(),
        levels: out,
    }
}

/// Sum over cells of the smaller count; only cells occupied in both
/// histograms contribute.
pub fn histogram_intersection(h1: &PyramidHistogram, h2: &PyramidHistogram, l: usize) -> Result<u64> {
    if h1.d != h2.d {
        return Err(Error::Internal(format!(
            "intersecting histograms of dimension {} and {}",
            h1.d, h2.d
        )));
    }
    if l >= h1.levels.len() || l >= h2.levels.len() {
        return Err(Error::Internal(format!("level {} out of range", l)));
    }
    let (small, large) = if h1.levels[l].len() <= h2.levels[l].len() {
        (&h1.levels[l], &h2.levels[l])
    } else {
        (&h2.levels[l], &h1.levels[l])
    };
    Ok(small
        .iter()
        .filter_map(|(key, &c1)| large.get(key).map(|&c2| c1.min(c2)))
        .sum())
}

/// Telescoped pyramid match over prebuilt histograms: the finest-level
/// intersection plus each coarser level's newly matched pairs, discounted by
/// half per level of separation.
pub fn pyramid_match_histograms(h1: &PyramidHistogram, h2: &PyramidHistogram) -> Result<f64> {
    if h1.n_levels() != h2.n_levels() {
        return Err(Error::Internal(format!(
            "pyramids have {} and {} levels",
            h1.n_levels(),
            h2.n_levels()
        )));
    }
    let levels = h1.n_levels() - 1;
    let mut inter = Vec::with_capacity(levels + 1);
    for l in 0..=levels {
        inter.push(histogram_intersection(h1, h2, l)? as f64);
    }
    let mut k = inter[levels];
    for l in 0..levels {
        k += (inter[l] - inter[l + 1]) / (1u64 << (levels - l)) as f64;
    }
    Ok(k)
}

/// Kernel value between two graphs with shared parameters d and L.
pub fn pyramid_match(g1: &TopoGraph, g2: &TopoGraph, d: usize, levels: usize) -> Result<f64> {
    let h1 = build_pyramid(&embed_nodes(g1, d)?, levels);
    let h2 = build_pyramid(&embed_nodes(g2, d)?, levels);
    pyramid_match_histograms(&h1, &h2)
}

/// Symmetric K×K matrix of pairwise kernel values.
#[derive(Debug, Clone, PartialEq)]
pub struct GravityMatrix {
    k: usize,
    values: Vec<f64>,
}

impl GravityMatrix {
    /// Build from a row-major k×k value buffer, enforcing symmetry and
    /// non-negativity.
    pub fn new(k: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != k * k {
            return Err(Error::Internal(format!(
                "gravity matrix needs {} values, got {}",
                k * k,
                values.len()
            )));
        }
        for i in 0..k {
            for j in 0..k {
                let v = values[i * k + j];
                if v < 0.0 || !v.is_finite() {
                    return Err(Error::Internal(format!(
                        "gravity entry ({}, {}) is {}",
                        i, j, v
                    )));
                }
                if v != values[j * k + i] {
                    return Err(Error::Internal(format!(
                        "gravity matrix asymmetric at ({}, {})",
                        i, j
                    )));
                }
            }
        }
        Ok(GravityMatrix { k, values })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.k + j]
    }

    /// Full row sums, diagonal included.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.k)
            .map(|i| (0..self.k).map(|j| self.at(i, j)).sum())
            .collect()
    }

    /// Full row means, diagonal included.
    pub fn row_means(&self) -> Vec<f64> {
        self.row_sums().into_iter().map(|s| s / self.k as f64).collect()
    }

    /// Upper triangle including the diagonal, row by row, for logging.
    pub fn upper_triangle(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.k * (self.k + 1) / 2);
        for i in 0..self.k {
            for j in i..self.k {
                out.push((i, j, self.at(i, j)));
            }
        }
        out
    }
}

/// Pairwise kernel values for all K graphs. Each unordered pair is computed
/// once and mirrored, so the matrix is symmetric to the bit.
pub fn gravity_matrix(graphs: &[TopoGraph], d: usize, levels: usize) -> Result<GravityMatrix> {
    let k = graphs.len();
    if k < 2 {
        return Err(Error::Config(format!(
            "gravity matrix needs at least 2 graphs, got {}",
            k
        )));
    }
    let pyramids: Vec<PyramidHistogram> = graphs
        .iter()
        .map(|g| Ok(build_pyramid(&embed_nodes(g, d)?, levels)))
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let v = pyramid_match_histograms(&pyramids[i], &pyramids[j])?;
            values[i * k + j] = v;
            values[j * k + i] = v;
        }
    }
    Ok(GravityMatrix { k, values })
}

#[cfg(test)]
mod tests;
