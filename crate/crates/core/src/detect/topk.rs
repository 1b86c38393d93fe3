use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivationVector, Corpus};

/// The most activated patches of one channel, as corpus indices in
/// descending activation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopPatches {
    pub prototype: usize,
    pub patches: Vec<usize>,
    pub activations: Vec<f64>,
    /// Fewer than the requested number of patches were available.
    pub short: bool,
}

/// Ranks patches by their per-location activation on channel `d`.
///
/// Ties are broken toward the smaller corpus index. With `dedup_per_image`
/// at most one patch (the strongest) is kept per image.
pub fn top_activated_patches(
    corpus: &Corpus,
    activations: &[ActivationVector],
    d: usize,
    k: usize,
    dedup_per_image: bool,
) -> Result<TopPatches> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if corpus.patches.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if activations.len() != corpus.patches.len() {
        return Err(Error::ShapeMismatch {
            context: "activations vs corpus patches",
            expected: corpus.patches.len(),
            found: activations.len(),
        });
    }
    if let Some(a) = activations.iter().find(|a| d >= a.len()) {
        return Err(Error::OutOfRange {
            what: "prototype",
            index: d,
            len: a.len(),
        });
    }
    let mut order: Vec<usize> = (0..activations.len()).collect();
    order.sort_by(|&a, &b| {
        activations[b].0[d]
            .total_cmp(&activations[a].0[d])
            .then(a.cmp(&b))
    });
    let mut seen = HashSet::new();
    let mut patches = Vec::with_capacity(k);
    for i in order {
        if patches.len() == k {
            break;
        }
        if dedup_per_image && !seen.insert(corpus.patches[i].image_id.as_str()) {
            continue;
        }
        patches.push(i);
    }
    let activations = patches.iter().map(|&i| activations[i].0[d]).collect();
    Ok(TopPatches {
        prototype: d,
        short: patches.len() < k,
        patches,
        activations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Location, PatchRecord};

    fn corpus(images: &[&str]) -> Corpus {
        Corpus {
            grid: (1, 4),
            patches: images
                .iter()
                .enumerate()
                .map(|(i, im)| PatchRecord::new(vec![1.0], *im, Location { h: 0, w: i as u32 }))
                .collect(),
            images: vec![],
        }
    }

    fn acts(values: &[f64]) -> Vec<ActivationVector> {
        values
            .iter()
            .map(|&v| ActivationVector(vec![v, 1.0 - v]))
            .collect()
    }

    #[test]
    fn single_patch() {
        let top = top_activated_patches(&corpus(&["a"]), &acts(&[0.3]), 0, 1, true).unwrap();
        assert_eq!(top.patches, vec![0]);
        assert!(!top.short);
    }

    #[test]
    fn picks_strongest() {
        let top = top_activated_patches(&corpus(&["a", "b"]), &acts(&[0.2, 0.9]), 0, 1, true)
            .unwrap();
        assert_eq!(top.patches, vec![1]);
    }

    #[test]
    fn dedup_and_short_flag() {
        let c = corpus(&["a", "a", "b"]);
        let a = acts(&[0.9, 0.8, 0.1]);
        let top = top_activated_patches(&c, &a, 0, 3, true).unwrap();
        assert_eq!(top.patches, vec![0, 2]);
        assert!(top.short);
        let top = top_activated_patches(&c, &a, 0, 3, false).unwrap();
        assert_eq!(top.patches, vec![0, 1, 2]);
        assert!(!top.short);
    }

    #[test]
    fn errors() {
        let c = corpus(&["a"]);
        assert!(top_activated_patches(&c, &acts(&[0.5]), 0, 0, true).is_err());
        assert!(top_activated_patches(&c, &acts(&[0.5]), 5, 1, true).is_err());
        assert!(top_activated_patches(&corpus(&[]), &[], 0, 1, true).is_err());
    }
}
