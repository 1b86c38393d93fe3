use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::detect::cosine_similarity;
use crate::error::{Error, Result};
use crate::model::{ActivationVector, Corpus, Location, PatchRecord, PrototypeBank};

use super::Membership;

/// Labeled training patches of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSets {
    pub s1: Vec<PatchRecord>,
    pub s2: Vec<PatchRecord>,
    pub sr: Vec<PatchRecord>,
}

impl ConceptSets {
    pub fn from_indices(corpus: &Corpus, s1: &[usize], s2: &[usize], sr: &[usize]) -> Result<Self> {
        let take = |idx: &[usize]| -> Result<Vec<PatchRecord>> {
            idx.iter()
                .map(|&i| {
                    corpus.patches.get(i).cloned().ok_or(Error::OutOfRange {
                        what: "patch",
                        index: i,
                        len: corpus.patches.len(),
                    })
                })
                .collect()
        };
        Ok(Self {
            s1: take(s1)?,
            s2: take(s2)?,
            sr: take(sr)?,
        })
    }

    /// Checks disjointness and the minimum concept size.
    pub fn validate(&self, min_concept: usize) -> Result<()> {
        if self.s1.len() < min_concept {
            return Err(Error::InvalidConcepts(format!(
                "concept A below minimum size ({} < {min_concept})",
                self.s1.len()
            )));
        }
        if self.s2.len() < min_concept {
            return Err(Error::InvalidConcepts(format!(
                "concept B below minimum size ({} < {min_concept})",
                self.s2.len()
            )));
        }
        let a: HashSet<(&str, Location)> = self.s1.iter().map(PatchRecord::key).collect();
        if self.s2.iter().any(|p| a.contains(&p.key())) {
            return Err(Error::InvalidConcepts(
                "concepts A and B share a patch".into(),
            ));
        }
        let b: HashSet<(&str, Location)> = self.s2.iter().map(PatchRecord::key).collect();
        if self
            .sr
            .iter()
            .any(|p| a.contains(&p.key()) || b.contains(&p.key()))
        {
            return Err(Error::InvalidConcepts(
                "reference set overlaps a concept".into(),
            ));
        }
        Ok(())
    }

    /// Every training patch with its membership, S1 then S2 then S_r.
    pub fn labeled(&self) -> impl Iterator<Item = (Membership, &PatchRecord)> {
        self.s1
            .iter()
            .map(|p| (Membership::S1, p))
            .chain(self.s2.iter().map(|p| (Membership::S2, p)))
            .chain(self.sr.iter().map(|p| (Membership::Reference, p)))
    }

    pub fn len(&self) -> usize {
        self.s1.len() + self.s2.len() + self.sr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub patches: Vec<usize>,
    pub short: bool,
}

/// Default reference-set size: `max(20, |S1| + |S2|)`.
pub fn default_reference_size(s1: usize, s2: usize) -> usize {
    (s1 + s2).max(20)
}

/// Collects patches that peak on other in-use prototypes.
///
/// Candidate prototypes are visited round-robin, ordered by kernel cosine
/// similarity to prototype `e` (closest first); each contributes its own
/// patches in descending activation order. Patches whose top channel is `e`,
/// or whose key appears in `exclude`, are skipped.
pub fn build_reference_set(
    corpus: &Corpus,
    activations: &[ActivationVector],
    bank: &PrototypeBank,
    e: usize,
    size: usize,
    exclude: &[&PatchRecord],
) -> Result<ReferenceSet> {
    if size == 0 {
        return Err(Error::InvalidConfig("reference set size must be >= 1".into()));
    }
    bank.check_prototype(e)?;
    if activations.len() != corpus.patches.len() {
        return Err(Error::ShapeMismatch {
            context: "activations vs corpus patches",
            expected: corpus.patches.len(),
            found: activations.len(),
        });
    }
    let excluded: HashSet<(&str, Location)> = exclude.iter().map(|p| p.key()).collect();
    let d_count = bank.num_prototypes();
    let mut per_proto: Vec<Vec<usize>> = vec![Vec::new(); d_count];
    for (i, act) in activations.iter().enumerate() {
        let Some(top) = act.top_channel() else { continue };
        if top == e || top >= d_count || !bank.in_use(top) {
            continue;
        }
        if excluded.contains(&corpus.patches[i].key()) {
            continue;
        }
        per_proto[top].push(i);
    }
    for (d, list) in per_proto.iter_mut().enumerate() {
        list.sort_by(|&a, &b| {
            activations[b].0[d]
                .total_cmp(&activations[a].0[d])
                .then(a.cmp(&b))
        });
    }
    let anchor = bank.kernel(e);
    let mut order: Vec<(usize, f64)> = (0..d_count)
        .filter(|&d| !per_proto[d].is_empty())
        .map(|d| (d, cosine_similarity(anchor, bank.kernel(d)).unwrap_or(0.0)))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut patches = Vec::with_capacity(size);
    let mut round = 0;
    while patches.len() < size {
        let mut took = false;
        for &(d, _) in &order {
            if let Some(&i) = per_proto[d].get(round) {
                patches.push(i);
                took = true;
                if patches.len() == size {
                    break;
                }
            }
        }
        if !took {
            break;
        }
        round += 1;
    }
    Ok(ReferenceSet {
        short: patches.len() < size,
        patches,
    })
}

/// A user's label for one served patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptLabel {
    A,
    B,
    SomethingElse,
}

/// Builds concept sets from per-patch labels (keys are corpus indices).
///
/// A and B become S1 and S2. The reference set is the automatic pool for
/// `e`; when `pool_something_else` is set, patches labeled Something Else
/// join it as well, otherwise they are dropped.
#[allow(clippy::too_many_arguments)]
pub fn concepts_from_labels(
    corpus: &Corpus,
    activations: &[ActivationVector],
    bank: &PrototypeBank,
    e: usize,
    labels: &BTreeMap<usize, ConceptLabel>,
    min_concept: usize,
    pool_something_else: bool,
) -> Result<ConceptSets> {
    let pick = |want: ConceptLabel| -> Vec<usize> {
        labels
            .iter()
            .filter(|(_, &l)| l == want)
            .map(|(&i, _)| i)
            .collect()
    };
    let (a, b, other) = (
        pick(ConceptLabel::A),
        pick(ConceptLabel::B),
        pick(ConceptLabel::SomethingElse),
    );
    let mut sets = ConceptSets::from_indices(corpus, &a, &b, &other)?;
    sets.sr.clear();
    sets.validate(min_concept)?;

    let labeled: Vec<&PatchRecord> = labels.keys().map(|&i| &corpus.patches[i]).collect();
    let auto = build_reference_set(
        corpus,
        activations,
        bank,
        e,
        default_reference_size(a.len(), b.len()),
        &labeled,
    )?;
    let mut sr = if pool_something_else { other } else { Vec::new() };
    sr.extend(auto.patches);
    sets.sr = ConceptSets::from_indices(corpus, &[], &[], &sr)?.sr;
    sets.validate(min_concept)?;
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::model::corpus_activations;
    use crate::exec::Execution;

    fn patch(image: &str, w: u32, feature: Vec<f64>) -> PatchRecord {
        PatchRecord::new(feature, image, Location { h: 0, w })
    }

    fn bank3() -> PrototypeBank {
        PrototypeBank::new(
            Matrix::from_rows(&[vec![5.0, 0.0], vec![0.0, 5.0], vec![-5.0, 0.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap(),
            vec!["c".into()],
        )
        .unwrap()
    }

    #[test]
    fn validation_gates() {
        let a = patch("i", 0, vec![1.0]);
        let b = patch("i", 1, vec![1.0]);
        let sets = ConceptSets {
            s1: vec![a.clone()],
            s2: vec![a.clone()],
            sr: vec![],
        };
        assert!(sets.validate(1).unwrap_err().to_string().contains("share"));
        let sets = ConceptSets {
            s1: vec![a.clone()],
            s2: vec![b.clone()],
            sr: vec![b.clone()],
        };
        assert!(sets.validate(1).unwrap_err().to_string().contains("reference"));
        let sets = ConceptSets {
            s1: vec![a],
            s2: vec![b],
            sr: vec![],
        };
        assert!(sets.validate(1).is_ok());
        assert!(sets.validate(2).unwrap_err().to_string().contains("concept A"));
    }

    #[test]
    fn reference_set_empty_when_everything_peaks_on_e() {
        let corpus = Corpus {
            grid: (1, 2),
            patches: vec![patch("a", 0, vec![1.0, 0.0]), patch("b", 0, vec![2.0, 0.1])],
            images: vec![],
        };
        let bank = bank3();
        let acts = corpus_activations(&corpus, &bank, Execution::Sequential).unwrap();
        let r = build_reference_set(&corpus, &acts, &bank, 0, 3, &[]).unwrap();
        assert!(r.patches.is_empty());
        assert!(r.short);
    }

    #[test]
    fn reference_set_single_candidate() {
        let corpus = Corpus {
            grid: (1, 2),
            patches: vec![patch("a", 0, vec![1.0, 0.0]), patch("b", 0, vec![0.0, 1.0])],
            images: vec![],
        };
        let bank = bank3();
        let acts = corpus_activations(&corpus, &bank, Execution::Sequential).unwrap();
        let r = build_reference_set(&corpus, &acts, &bank, 0, 1, &[]).unwrap();
        assert_eq!(r.patches, vec![1]);
        assert!(!r.short);
        let excluded = corpus.patches[1].clone();
        let r = build_reference_set(&corpus, &acts, &bank, 0, 1, &[&excluded]).unwrap();
        assert!(r.patches.is_empty());
    }

    #[test]
    fn round_robin_prefers_similar_kernels() {
        let corpus = Corpus {
            grid: (1, 4),
            patches: vec![
                patch("a", 0, vec![0.0, 1.0]),
                patch("b", 0, vec![0.0, 2.0]),
                patch("c", 0, vec![-1.0, 0.0]),
            ],
            images: vec![],
        };
        let bank = bank3();
        let acts = corpus_activations(&corpus, &bank, Execution::Sequential).unwrap();
        let r = build_reference_set(&corpus, &acts, &bank, 0, 3, &[]).unwrap();
        // prototype 1 (orthogonal to e) before prototype 2 (opposite)
        assert_eq!(r.patches, vec![1, 2, 0]);
    }
}
