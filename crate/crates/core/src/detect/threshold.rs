//! Threshold sweep over per-prototype similarity graphs and the resulting
//! inconsistency ranking.

use serde::{Deserialize, Serialize};

use super::cliques::maximal_cliques;
use super::similarity::{SimilarityGraph, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Detection outcome for one prototype at one threshold.
///
/// Clique members are positions within the prototype's patch set. Cliques
/// are only kept for flagged prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliqueReport {
    pub prototype_id: usize,
    pub clique_a: Vec<usize>,
    pub clique_b: Vec<usize>,
    pub dissimilarity: f64,
    pub flagged: bool,
    pub threshold_used: f64,
}

impl CliqueReport {
    fn unflagged(prototype_id: usize, threshold: f64) -> Self {
        Self {
            prototype_id,
            clique_a: Vec::new(),
            clique_b: Vec::new(),
            dissimilarity: 0.0,
            flagged: false,
            threshold_used: threshold,
        }
    }
}

/// One minus the largest cross-clique cosine similarity.
pub fn clique_dissimilarity(
    clique_a: &[usize],
    clique_b: &[usize],
    similarities: &SimilarityMatrix,
) -> Result<f64> {
    if clique_a.is_empty() || clique_b.is_empty() {
        return Err(Error::Empty("clique"));
    }
    let max = clique_a
        .iter()
        .flat_map(|&i| clique_b.iter().map(move |&j| similarities.get(i, j)))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(1.0 - max)
}

/// Checks the two largest maximal cliques of a patch set for two disjoint
/// concepts of at least `min_clique` patches each.
pub fn evaluate_prototype(
    prototype_id: usize,
    similarities: &SimilarityMatrix,
    threshold: f64,
    min_clique: usize,
) -> Result<CliqueReport> {
    if min_clique == 0 {
        return Err(Error::InvalidConfig("minimum clique size must be >= 1".into()));
    }
    if similarities.len() < 2 * min_clique {
        return Ok(CliqueReport::unflagged(prototype_id, threshold));
    }
    let graph = similarities.graph(threshold);
    Ok(evaluate_graph(prototype_id, &graph, similarities, min_clique))
}

fn evaluate_graph(
    prototype_id: usize,
    graph: &SimilarityGraph,
    similarities: &SimilarityMatrix,
    min_clique: usize,
) -> CliqueReport {
    let threshold = graph.threshold();
    let cliques = maximal_cliques(graph);
    let [a, b] = match cliques.as_slice() {
        [a, b, ..] => [a, b],
        _ => return CliqueReport::unflagged(prototype_id, threshold),
    };
    let disjoint = a.iter().all(|i| !b.contains(i));
    if a.len() < min_clique || b.len() < min_clique || !disjoint {
        return CliqueReport::unflagged(prototype_id, threshold);
    }
    let dissimilarity =
        clique_dissimilarity(a, b, similarities).expect("cliques are non-empty");
    CliqueReport {
        prototype_id,
        clique_a: a.clone(),
        clique_b: b.clone(),
        dissimilarity,
        flagged: true,
        threshold_used: threshold,
    }
}

/// A prototype's top-activated patch set with its similarity matrix.
#[derive(Debug, Clone)]
pub struct PrototypePatches {
    pub prototype: usize,
    pub similarities: SimilarityMatrix,
}

/// Sum of dissimilarities over the prototypes flagged at `threshold`.
pub fn score_threshold(
    sets: &[PrototypePatches],
    threshold: f64,
    min_clique: usize,
    exec: Execution,
) -> Result<f64> {
    let reports = evaluate_all(sets, threshold, min_clique, exec)?;
    Ok(reports
        .iter()
        .filter(|r| r.flagged)
        .map(|r| r.dissimilarity)
        .sum())
}

fn evaluate_all(
    sets: &[PrototypePatches],
    threshold: f64,
    min_clique: usize,
    exec: Execution,
) -> Result<Vec<CliqueReport>> {
    exec.map_slice(sets, |s| {
        evaluate_prototype(s.prototype, &s.similarities, threshold, min_clique)
    })
    .into_iter()
    .collect()
}

/// Inclusive threshold grid `min, min + step, ...` up to `max`.
pub fn threshold_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(min < max) || !(step > 0.0) || !min.is_finite() || !max.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "threshold grid [{min}, {max}] step {step} is empty"
        )));
    }
    let n = ((max - min) / step + 1e-9).floor() as usize;
    // keep grid points on a clean decimal lattice
    Ok((0..=n)
        .map(|i| ((min + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearch {
    pub delta_star: f64,
    pub grid: Vec<f64>,
    pub scores: Vec<f64>,
    /// Reports for every prototype at `delta_star`, in input order.
    pub reports: Vec<CliqueReport>,
    /// Flagged prototype ids, most dissimilar first.
    pub ranking: Vec<usize>,
}

impl ThresholdSearch {
    pub fn ranked_reports(&self) -> Vec<&CliqueReport> {
        self.ranking
            .iter()
            .filter_map(|&d| self.reports.iter().find(|r| r.prototype_id == d))
            .collect()
    }

    pub fn best_score(&self) -> f64 {
        self.grid
            .iter()
            .position(|&g| g == self.delta_star)
            .map_or(0.0, |i| self.scores[i])
    }
}

/// Sweeps the threshold grid, keeps the best-scoring threshold (ties go to
/// the smaller one) and ranks the prototypes flagged there.
pub fn find_optimal_threshold(
    sets: &[PrototypePatches],
    grid: &[f64],
    min_clique: usize,
    exec: Execution,
) -> Result<ThresholdSearch> {
    if grid.is_empty() {
        return Err(Error::Empty("threshold grid"));
    }
    if min_clique == 0 {
        return Err(Error::InvalidConfig("minimum clique size must be >= 1".into()));
    }
    let n = sets.len();
    let per_pair: Vec<Result<CliqueReport>> = exec.map_range(grid.len() * n, |i| {
        let (g, d) = (i / n, i % n);
        evaluate_prototype(sets[d].prototype, &sets[d].similarities, grid[g], min_clique)
    });
    let mut scores = vec![0.0; grid.len()];
    for (i, r) in per_pair.into_iter().enumerate() {
        let r = r?;
        if r.flagged {
            scores[i / n.max(1)] += r.dissimilarity;
        }
    }
    let mut best_score = 0.0;
    let mut delta_star = grid[0];
    for (&delta, &score) in grid.iter().zip(&scores) {
        if score > best_score {
            best_score = score;
            delta_star = delta;
        }
    }
    let reports = evaluate_all(sets, delta_star, min_clique, exec)?;
    let mut flagged: Vec<&CliqueReport> = reports.iter().filter(|r| r.flagged).collect();
    flagged.sort_by(|a, b| {
        b.dissimilarity
            .total_cmp(&a.dissimilarity)
            .then(a.prototype_id.cmp(&b.prototype_id))
    });
    let ranking = flagged.iter().map(|r| r.prototype_id).collect();
    Ok(ThresholdSearch {
        delta_star,
        grid: grid.to_vec(),
        scores,
        reports,
        ranking,
    })
}
