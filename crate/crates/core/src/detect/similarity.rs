use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            context: "cosine similarity operands",
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Pairwise cosine similarities of a patch set, computed once and reused
/// across every threshold of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_features<V: AsRef<[f64]>>(features: &[V]) -> Result<Self> {
        let n = features.len();
        let mut values = vec![1.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let s = cosine_similarity(features[i].as_ref(), features[j].as_ref())?;
                values[i * n + j] = s;
                values[j * n + i] = s;
            }
        }
        // validates single-element sets too
        if n == 1 {
            cosine_similarity(features[0].as_ref(), features[0].as_ref())?;
        }
        Ok(Self { n, values })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn graph(&self, threshold: f64) -> SimilarityGraph {
        let mut edges = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.get(i, j) > threshold {
                    edges.push((i, j));
                }
            }
        }
        SimilarityGraph::new(self.n, edges, threshold)
    }
}

/// Undirected graph over the positions `0..n` of a patch set; an edge joins
/// two patches whose cosine similarity exceeds `threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    n: usize,
    adjacency: Vec<Vec<u64>>,
    threshold: f64,
}

impl SimilarityGraph {
    /// Builds a graph from an explicit edge list. Self-loops are dropped.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>, threshold: f64) -> Self {
        let words = n.div_ceil(64);
        let mut adjacency = vec![vec![0u64; words]; n];
        for (a, b) in edges {
            assert!(a < n && b < n, "edge ({a}, {b}) outside graph of {n} nodes");
            if a == b {
                continue;
            }
            adjacency[a][b / 64] |= 1 << (b % 64);
            adjacency[b][a / 64] |= 1 << (a % 64);
        }
        Self {
            n,
            adjacency,
            threshold,
        }
    }

    pub fn from_features<V: AsRef<[f64]>>(features: &[V], threshold: f64) -> Result<Self> {
        Ok(SimilarityMatrix::from_features(features)?.graph(threshold))
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a][b / 64] >> (b % 64) & 1 == 1
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency
            .iter()
            .map(|row| row.iter().map(|w| w.count_ones() as usize).sum::<usize>())
            .sum::<usize>()
            / 2
    }

    pub(crate) fn neighbors(&self, v: usize) -> &[u64] {
        &self.adjacency[v]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_and_mismatch() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector)
        ));
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn graph_uses_strict_threshold() {
        let feats = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]];
        let g = SimilarityGraph::from_features(&feats, std::f64::consts::FRAC_1_SQRT_2).unwrap();
        assert_eq!(g.edge_count(), 0);
        let g = SimilarityGraph::from_features(&feats, 0.7).unwrap();
        assert!(g.has_edge(0, 1) && g.has_edge(1, 2) && !g.has_edge(0, 2));
    }

    #[test]
    fn no_self_loops() {
        let g = SimilarityGraph::new(3, [(0, 0), (1, 2)], 0.5);
        assert!(!g.has_edge(0, 0));
        assert_eq!(g.edge_count(), 1);
    }
}
