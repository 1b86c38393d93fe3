//! End-to-end flows: splitting prototypes into an updated bank and scoring
//! a bank against part annotations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bundle::SplitLineage;
use crate::detect::{top_activated_patches, DetectionReport};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{accuracy, part_purity, pattern_purity};
use crate::model::{corpus_activations, pooled_image_activations, ActivationVector, Corpus, PrototypeBank};
use crate::split::{
    build_reference_set, concepts_from_labels, default_reference_size, reinit_and_finetune_head,
    run_split_with_progress, ConceptAccuracy, ConceptLabel, ConceptSets, FinetuneParams, HeadInit,
    Progress, SplitHyperparams, SplitSession,
};

pub const SPLIT_SCHEMA: &str = "protosplit.split/1";
pub const METRICS_SCHEMA: &str = "protosplit.metrics/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub hyper: SplitHyperparams,
    pub finetune: FinetuneParams,
    /// Minimum concept size Q.
    pub min_concept: usize,
    /// Patches labeled Something Else join the reference set.
    pub pool_something_else: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            hyper: SplitHyperparams::default(),
            finetune: FinetuneParams::default(),
            min_concept: 2,
            pool_something_else: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub prototype: usize,
    pub duplicate: usize,
    pub concept_a: usize,
    pub concept_b: usize,
    pub reference: usize,
    pub steps: usize,
    pub converged: bool,
    pub accuracy: ConceptAccuracy,
    pub head_init: HeadInit,
}

impl SplitRecord {
    pub fn lineage(&self) -> SplitLineage {
        SplitLineage {
            original: self.prototype,
            duplicate: self.duplicate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub schema: String,
    pub seed: u64,
    pub config: SplitConfig,
    pub splits: Vec<SplitRecord>,
    /// Requested prototypes that were not split, with the reason.
    pub skipped: Vec<(usize, String)>,
}

/// Seed of the `index`-th split of a run.
pub fn split_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Splits prototype `e` of `bank` on `sets`: trains the kernel pair, then
/// re-initializes and fine-tunes both head rows on the pooled image
/// activations of the updated bank. Returns the grown bank.
#[allow(clippy::too_many_arguments)]
pub fn split_prototype(
    corpus: &Corpus,
    bank: &PrototypeBank,
    e: usize,
    sets: ConceptSets,
    cfg: &SplitConfig,
    seed: u64,
    exec: Execution,
    on_progress: impl FnMut(Progress),
) -> Result<(PrototypeBank, SplitRecord)> {
    let (a, b, r) = (sets.s1.len(), sets.s2.len(), sets.sr.len());
    let mut session = SplitSession::new(bank, e, sets, cfg.hyper.clone(), cfg.min_concept)?;
    let result = run_split_with_progress(&mut session, seed, on_progress)?;
    let rows = [result.pair.original, result.pair.duplicate];
    let per_patch = corpus_activations(corpus, &result.bank, exec)?;
    let dataset = pooled_image_activations(corpus, &per_patch)?;
    let (bank, head_init) =
        reinit_and_finetune_head(&result.bank, &rows, &dataset, &cfg.finetune, seed.rotate_left(17))?;
    Ok((
        bank,
        SplitRecord {
            prototype: e,
            duplicate: result.pair.duplicate,
            concept_a: a,
            concept_b: b,
            reference: r,
            steps: result.steps,
            converged: result.converged,
            accuracy: result.accuracy,
            head_init,
        },
    ))
}

/// Concept sets from the two cliques the detector found for `e`; the
/// reference set is drawn from patches of other prototypes.
pub fn heuristic_concepts(
    corpus: &Corpus,
    activations: &[ActivationVector],
    bank: &PrototypeBank,
    report: &DetectionReport,
    e: usize,
) -> Result<ConceptSets> {
    let (a, b) = report
        .concept_patches(e)
        .ok_or_else(|| Error::InvalidConcepts(format!("prototype {e} was not flagged")))?;
    let served = report.patch_set(e).map(|s| s.patches.clone()).unwrap_or_default();
    let exclude: Vec<_> = served.iter().map(|&i| &corpus.patches[i]).collect();
    let reference = build_reference_set(
        corpus,
        activations,
        bank,
        e,
        default_reference_size(a.len(), b.len()),
        &exclude,
    )?;
    ConceptSets::from_indices(corpus, &a, &b, &reference.patches)
}

/// Splits the `top` highest-ranked flagged prototypes one after another.
/// Activations are recomputed after every split so later reference sets
/// see the grown bank.
pub fn auto_split(
    corpus: &Corpus,
    bank: &PrototypeBank,
    report: &DetectionReport,
    top: usize,
    cfg: &SplitConfig,
    seed: u64,
    exec: Execution,
) -> Result<(PrototypeBank, SplitReport)> {
    let mut current = bank.clone();
    let mut splits = Vec::new();
    let mut skipped = Vec::new();
    for (i, &e) in report.ranking.iter().take(top).enumerate() {
        let activations = corpus_activations(corpus, &current, exec)?;
        let sets = heuristic_concepts(corpus, &activations, &current, report, e)?;
        match split_prototype(corpus, &current, e, sets, cfg, split_seed(seed, i), exec, |_| {}) {
            Ok((next, record)) => {
                current = next;
                splits.push(record);
            }
            Err(err @ Error::InvalidConcepts(_)) => skipped.push((e, err.to_string())),
            Err(err) => return Err(err),
        }
    }
    Ok((
        current,
        SplitReport {
            schema: SPLIT_SCHEMA.to_string(),
            seed,
            config: cfg.clone(),
            splits,
            skipped,
        },
    ))
}

/// User-provided labels for one prototype, keyed by corpus patch index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub prototype: usize,
    pub labels: BTreeMap<usize, ConceptLabel>,
}

/// Applies labeled splits in order.
pub fn split_with_labels(
    corpus: &Corpus,
    bank: &PrototypeBank,
    submissions: &[LabelSubmission],
    cfg: &SplitConfig,
    seed: u64,
    exec: Execution,
) -> Result<(PrototypeBank, SplitReport)> {
    let mut current = bank.clone();
    let mut splits = Vec::new();
    for (i, sub) in submissions.iter().enumerate() {
        let activations = corpus_activations(corpus, &current, exec)?;
        let sets = concepts_from_labels(
            corpus,
            &activations,
            &current,
            sub.prototype,
            &sub.labels,
            cfg.min_concept,
            cfg.pool_something_else,
        )?;
        let (next, record) = split_prototype(
            corpus,
            &current,
            sub.prototype,
            sets,
            cfg,
            split_seed(seed, i),
            exec,
            |_| {},
        )?;
        current = next;
        splits.push(record);
    }
    Ok((
        current,
        SplitReport {
            schema: SPLIT_SCHEMA.to_string(),
            seed,
            config: cfg.clone(),
            splits,
            skipped: Vec::new(),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub channel: usize,
    pub patches: Vec<usize>,
    pub pattern_purity: f64,
    pub part_purity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline_accuracy: f64,
    pub accuracy_delta: f64,
    /// Mean pattern purity of the split originals in the baseline bank.
    pub baseline_split_pattern_purity: f64,
    pub split_pattern_purity_delta: f64,
    pub baseline_split_part_purity: f64,
    pub split_part_purity_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub top_k: usize,
    pub accuracy: f64,
    /// Every in-use channel.
    pub channels: Vec<ChannelMetrics>,
    pub mean_pattern_purity: f64,
    pub mean_part_purity: f64,
    /// Both channels of every split.
    pub split_channels: Vec<usize>,
    pub split_pattern_purity: f64,
    pub split_part_purity: f64,
    pub comparison: Option<Comparison>,
}

impl MetricsReport {
    pub fn channel(&self, d: usize) -> Option<&ChannelMetrics> {
        self.channels.iter().find(|c| c.channel == d)
    }

    fn mean_over(&self, channels: &[usize], f: impl Fn(&ChannelMetrics) -> f64) -> f64 {
        let values: Vec<f64> = channels.iter().filter_map(|&d| self.channel(d)).map(f).collect();
        mean(&values)
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Purity of every in-use channel's top-k patches, classification accuracy
/// on the corpus images, and split-channel means.
pub fn evaluate_metrics(
    corpus: &Corpus,
    bank: &PrototypeBank,
    patch_parts: &[BTreeSet<String>],
    lineage: &[SplitLineage],
    top_k: usize,
    dedup_per_image: bool,
    exec: Execution,
) -> Result<MetricsReport> {
    if patch_parts.len() != corpus.patches.len() {
        return Err(Error::ShapeMismatch {
            context: "part annotations vs patches",
            expected: corpus.patches.len(),
            found: patch_parts.len(),
        });
    }
    let activations = corpus_activations(corpus, bank, exec)?;
    let in_use: Vec<usize> = (0..bank.num_prototypes()).filter(|&d| bank.in_use(d)).collect();
    let channels = exec
        .map_slice(&in_use, |&d| -> Result<ChannelMetrics> {
            let top = top_activated_patches(corpus, &activations, d, top_k, dedup_per_image)?;
            let parts: Vec<&BTreeSet<String>> = top.patches.iter().map(|&i| &patch_parts[i]).collect();
            Ok(ChannelMetrics {
                channel: d,
                pattern_purity: pattern_purity(&parts)?,
                part_purity: part_purity(&parts)?,
                patches: top.patches,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let dataset = pooled_image_activations(corpus, &activations)?;
    let split_channels: Vec<usize> = lineage
        .iter()
        .flat_map(|l| [l.original, l.duplicate])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut report = MetricsReport {
        schema: METRICS_SCHEMA.to_string(),
        top_k,
        accuracy: accuracy(bank, &dataset)?,
        mean_pattern_purity: mean(&channels.iter().map(|c| c.pattern_purity).collect::<Vec<_>>()),
        mean_part_purity: mean(&channels.iter().map(|c| c.part_purity).collect::<Vec<_>>()),
        channels,
        split_pattern_purity: 0.0,
        split_part_purity: 0.0,
        split_channels,
        comparison: None,
    };
    report.split_pattern_purity = report.mean_over(&report.split_channels, |c| c.pattern_purity);
    report.split_part_purity = report.mean_over(&report.split_channels, |c| c.part_purity);
    Ok(report)
}

/// Attaches deltas against the metrics of the bank before splitting.
pub fn compare(report: &mut MetricsReport, baseline: &MetricsReport, lineage: &[SplitLineage]) {
    let originals: Vec<usize> = lineage
        .iter()
        .map(|l| l.original)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let base_pp = baseline.mean_over(&originals, |c| c.pattern_purity);
    let base_part = baseline.mean_over(&originals, |c| c.part_purity);
    report.comparison = Some(Comparison {
        baseline_accuracy: baseline.accuracy,
        accuracy_delta: report.accuracy - baseline.accuracy,
        baseline_split_pattern_purity: base_pp,
        split_pattern_purity_delta: report.split_pattern_purity - base_pp,
        baseline_split_part_purity: base_part,
        split_part_purity_delta: report.split_part_purity - base_part,
    });
}
