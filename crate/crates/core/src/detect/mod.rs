//! Inconsistency detection: similarity graphs over each prototype's most
//! activated patches, maximal cliques, and a threshold sweep that ranks
//! prototypes by the separation of their two largest cliques.

mod cliques;
mod similarity;
mod threshold;
mod topk;

use serde::{Deserialize, Serialize};

pub use cliques::maximal_cliques;
pub use similarity::{cosine_similarity, SimilarityGraph, SimilarityMatrix};
pub use threshold::{
    clique_dissimilarity, evaluate_prototype, find_optimal_threshold, score_threshold,
    threshold_grid, CliqueReport, PrototypePatches, ThresholdSearch,
};
pub use topk::{top_activated_patches, TopPatches};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{corpus_activations, ActivationVector, Corpus, PrototypeBank};

pub const DETECTION_SCHEMA: &str = "protosplit.detection/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    /// Size of each prototype's patch set.
    pub patches_per_prototype: usize,
    pub dedup_per_image: bool,
    pub delta_min: f64,
    pub delta_max: f64,
    pub delta_step: f64,
    /// Minimum clique size Q.
    pub min_clique: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            patches_per_prototype: 10,
            dedup_per_image: true,
            delta_min: 0.05,
            delta_max: 0.95,
            delta_step: 0.05,
            min_clique: 2,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=50).contains(&self.patches_per_prototype) {
            return Err(Error::InvalidConfig(format!(
                "patches per prototype must be in 1..=50, got {}",
                self.patches_per_prototype
            )));
        }
        if self.min_clique == 0 {
            return Err(Error::InvalidConfig("minimum clique size must be >= 1".into()));
        }
        threshold_grid(self.delta_min, self.delta_max, self.delta_step).map(|_| ())
    }
}

/// Serialized detection result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub schema: String,
    pub config: DetectionConfig,
    pub delta_star: f64,
    pub grid: Vec<f64>,
    pub scores: Vec<f64>,
    /// Top-activated patch set of every prototype (corpus indices).
    pub patch_sets: Vec<TopPatches>,
    /// One report per prototype at `delta_star`.
    pub reports: Vec<CliqueReport>,
    /// Flagged prototypes, most dissimilar first.
    pub ranking: Vec<usize>,
    pub mean_dissimilarity_flagged: f64,
    pub mean_dissimilarity_all: f64,
}

impl DetectionReport {
    pub fn report(&self, prototype: usize) -> Option<&CliqueReport> {
        self.reports.iter().find(|r| r.prototype_id == prototype)
    }

    pub fn patch_set(&self, prototype: usize) -> Option<&TopPatches> {
        self.patch_sets.iter().find(|p| p.prototype == prototype)
    }

    /// The two cliques of a flagged prototype as corpus patch indices.
    pub fn concept_patches(&self, prototype: usize) -> Option<(Vec<usize>, Vec<usize>)> {
        let report = self.report(prototype).filter(|r| r.flagged)?;
        let set = self.patch_set(prototype)?;
        let map = |c: &[usize]| c.iter().map(|&i| set.patches[i]).collect();
        Some((map(&report.clique_a), map(&report.clique_b)))
    }

    pub fn flagged_count(&self) -> usize {
        self.ranking.len()
    }
}

/// Builds each prototype's patch set and similarity matrix.
pub fn prototype_patch_sets(
    corpus: &Corpus,
    activations: &[ActivationVector],
    bank: &PrototypeBank,
    cfg: &DetectionConfig,
    exec: Execution,
) -> Result<(Vec<TopPatches>, Vec<PrototypePatches>)> {
    let tops: Vec<TopPatches> = exec
        .map_range(bank.num_prototypes(), |d| {
            top_activated_patches(
                corpus,
                activations,
                d,
                cfg.patches_per_prototype,
                cfg.dedup_per_image,
            )
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let sets = exec
        .map_slice(&tops, |t| {
            let feats: Vec<&[f64]> = t
                .patches
                .iter()
                .map(|&i| corpus.patches[i].feature.as_slice())
                .collect();
            SimilarityMatrix::from_features(&feats).map(|similarities| PrototypePatches {
                prototype: t.prototype,
                similarities,
            })
        })
        .into_iter()
        .collect::<Result<_>>()?;
    Ok((tops, sets))
}

/// Full detection pass over a corpus.
pub fn detect(
    corpus: &Corpus,
    bank: &PrototypeBank,
    cfg: &DetectionConfig,
    exec: Execution,
) -> Result<DetectionReport> {
    cfg.validate()?;
    let activations = corpus_activations(corpus, bank, exec)?;
    detect_with_activations(corpus, &activations, bank, cfg, exec)
}

pub fn detect_with_activations(
    corpus: &Corpus,
    activations: &[ActivationVector],
    bank: &PrototypeBank,
    cfg: &DetectionConfig,
    exec: Execution,
) -> Result<DetectionReport> {
    cfg.validate()?;
    let (patch_sets, sets) = prototype_patch_sets(corpus, activations, bank, cfg, exec)?;
    let grid = threshold_grid(cfg.delta_min, cfg.delta_max, cfg.delta_step)?;
    let search = find_optimal_threshold(&sets, &grid, cfg.min_clique, exec)?;
    let flagged: Vec<f64> = search
        .reports
        .iter()
        .filter(|r| r.flagged)
        .map(|r| r.dissimilarity)
        .collect();
    let mean = |xs: &[f64], n: usize| if n == 0 { 0.0 } else { xs.iter().sum::<f64>() / n as f64 };
    Ok(DetectionReport {
        schema: DETECTION_SCHEMA.to_string(),
        config: cfg.clone(),
        delta_star: search.delta_star,
        grid: search.grid,
        scores: search.scores,
        patch_sets,
        mean_dissimilarity_flagged: mean(&flagged, flagged.len()),
        mean_dissimilarity_all: mean(&flagged, search.reports.len()),
        reports: search.reports,
        ranking: search.ranking,
    })
}

/// Flagged prototype count at a fixed threshold for a given `min_clique`.
pub fn flagged_count_at(
    sets: &[PrototypePatches],
    threshold: f64,
    min_clique: usize,
    exec: Execution,
) -> Result<usize> {
    let flags: Vec<Result<bool>> = exec.map_slice(sets, |s| {
        evaluate_prototype(s.prototype, &s.similarities, threshold, min_clique).map(|r| r.flagged)
    });
    flags
        .into_iter()
        .try_fold(0, |n, f| f.map(|f| n + usize::from(f)))
}
