//! k-nearest-neighbor graph with row-normalized Gaussian weights over the
//! pooled image representations.
//!
//! Weights follow S[i][i'] = exp(-gamma ||y_i - y_i'||^2) normalized over the
//! stored neighbor set of i, so each row sums to 1. The graph is asymmetric:
//! kNN membership and the per-row normalizer both break symmetry.

use ndarray::ArrayView2;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SimilarityGraph {
    /// neighbors[i] lists the min(k, n-1) nearest columns to column i, i excluded.
    pub neighbors: Vec<Vec<usize>>,
    /// weights[i][j] is the normalized weight of neighbors[i][j].
    pub weights: Vec<Vec<f64>>,
    pub gamma: f64,
    pub k: usize,
}

impl SimilarityGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Incoming edge lists: for each i, the pairs (i', w) with S[i'][i] = w.
    pub fn transpose_adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut incoming = vec![Vec::new(); self.len()];
        for (i, (ns, ws)) in self.neighbors.iter().zip(&self.weights).enumerate() {
            for (&j, &w) in ns.iter().zip(ws) {
                incoming[j].push((i, w));
            }
        }
        incoming
    }
}

fn squared_distance(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest neighbors of each column of Y (r x n) by squared Euclidean
/// distance; ties break toward the smaller index.
pub fn knn_neighbors(y: ArrayView2<'_, f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = y.ncols();
    if n < 2 {
        return Err(Error::TooFewImages);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let keep = k.min(n - 1);
    let mut neighbors = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (squared_distance(y.column(i), y.column(j)), j))
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        neighbors.push(dists[..keep].iter().map(|&(_, j)| j).collect());
    }
    Ok(neighbors)
}

/// Gaussian kernel weights over the given neighbor lists, normalized per row.
///
/// When the normalizer underflows to zero the row falls back to uniform
/// weights, so all-identical representations stay NaN-free.
pub fn build_similarity(
    y: ArrayView2<'_, f64>,
    neighbors: &[Vec<usize>],
    gamma: f64,
) -> Result<SimilarityGraph> {
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gamma must be a positive real, got {gamma}"
        )));
    }
    if neighbors.len() != y.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "{} neighbor lists for {} columns",
            neighbors.len(),
            y.ncols()
        )));
    }
    let k = neighbors.iter().map(|ns| ns.len()).max().unwrap_or(0);
    let mut weights = Vec::with_capacity(neighbors.len());
    for (i, ns) in neighbors.iter().enumerate() {
        let kernels: Vec<f64> = ns
            .iter()
            .map(|&j| (-gamma * squared_distance(y.column(i), y.column(j))).exp())
            .collect();
        let total: f64 = kernels.iter().sum();
        let row = if total > 0.0 {
            kernels.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / ns.len() as f64; ns.len()]
        };
        weights.push(row);
    }
    Ok(SimilarityGraph {
        neighbors: neighbors.to_vec(),
        weights,
        gamma,
        k,
    })
}

/// Median heuristic: 1 / median(squared neighbor distances) over all stored
/// pairs. Falls back to 1.0 when the median is zero.
pub fn median_gamma(y: ArrayView2<'_, f64>, neighbors: &[Vec<usize>]) -> f64 {
    let mut dists: Vec<f64> = Vec::new();
    for (i, ns) in neighbors.iter().enumerate() {
        for &j in ns {
            dists.push(squared_distance(y.column(i), y.column(j)));
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if median > 0.0 {
        1.0 / median
    } else {
        1.0
    }
}
