//! Per-modality kNN correlation graph.
//!
//! `w(p, q) = 1` iff `p` is one of the `k` nearest neighbors of `q` among the
//! training instances. The graph is not symmetrized. Neighbor lists are the
//! source of *manifold positives*: for a query of modality A, a neighbor `j`
//! is looked up in A's graph and the modality-B item paired with `j` is the
//! positive.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::FeatureMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    #[default]
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(Error::invalid(format!("unknown metric {s:?}"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

/// Exact k-nearest-neighbor lists, nearest first, self excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    k: usize,
    neighbors: Vec<usize>,
}

impl KnnGraph {
    /// Builds a graph from explicit neighbor lists, checking every invariant.
    pub fn from_lists(k: usize, lists: &[Vec<usize>]) -> Result<Self> {
        let n = lists.len();
        if k == 0 || k >= n.max(1) {
            return Err(Error::invalid(format!("k = {k} out of range for {n} instances")));
        }
        let mut neighbors = Vec::with_capacity(n * k);
        for (q, list) in lists.iter().enumerate() {
            if list.len() != k {
                return Err(Error::invalid(format!("instance {q} has {} neighbors, expected {k}", list.len())));
            }
            for (i, &p) in list.iter().enumerate() {
                if p >= n || p == q || list[..i].contains(&p) {
                    return Err(Error::invalid(format!("instance {q} has invalid neighbor {p}")));
                }
            }
            neighbors.extend_from_slice(list);
        }
        Ok(Self { k, neighbors })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `NN_k(q)`, nearest first.
    pub fn neighbors(&self, q: usize) -> &[usize] {
        &self.neighbors[q * self.k..(q + 1) * self.k]
    }

    /// The adjacency entry `w(p, q)`.
    pub fn contains(&self, p: usize, q: usize) -> bool {
        self.neighbors(q).contains(&p)
    }

    /// Debug dump, one `q: j1 j2 ... jk` line per instance.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for q in 0..self.len() {
            let _ = write!(out, "{q}:");
            for j in self.neighbors(q) {
                let _ = write!(out, " {j}");
            }
            out.push('\n');
        }
        out
    }
}

/// Brute-force exact kNN over all rows. Ties are broken by lower index.
pub fn build_knn_graph(features: &FeatureMatrix, k: usize, metric: Metric) -> Result<KnnGraph> {
    let n = features.rows();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={}", n.saturating_sub(1))));
    }
    let dim = features.cols();
    let mut rows: Vec<f64> = features.values().iter().map(|&v| f64::from(v)).collect();
    if metric == Metric::Cosine {
        for (i, row) in rows.chunks_mut(dim).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNormRow(i));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let rows = &rows;
    let distance = move |a: usize, b: usize| -> f64 {
        let (x, y) = (&rows[a * dim..(a + 1) * dim], &rows[b * dim..(b + 1) * dim]);
        match metric {
            Metric::Euclidean => x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum(),
            Metric::Cosine => 1.0 - x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>(),
        }
    };

    let neighbors: Vec<usize> = (0..n)
        .into_par_iter()
        .flat_map_iter(|q| {
            let mut cands: Vec<(f64, usize)> = (0..n).filter(|&p| p != q).map(|p| (distance(q, p), p)).collect();
            let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
            if k < cands.len() {
                cands.select_nth_unstable_by(k, by_dist);
                cands.truncate(k);
            }
            cands.sort_unstable_by(by_dist);
            cands.into_iter().map(|(_, p)| p)
        })
        .collect();
    Ok(KnnGraph { k, neighbors })
}

/// Draws uniformly from `NN_k(q)`, plus `q` itself when `include_self` is set.
///
/// The caller maps the returned index to its paired item of the other modality.
pub fn sample_manifold_positive<R: Rng + ?Sized>(graph: &KnnGraph, q: usize, include_self: bool, rng: &mut R) -> usize {
    let k = graph.k();
    let slot = rng.random_range(0..k + usize::from(include_self));
    if slot == k {
        q
    } else {
        graph.neighbors(q)[slot]
    }
}
