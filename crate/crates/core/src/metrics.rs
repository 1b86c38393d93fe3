//! Purity and accuracy metrics.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::argmax;
use crate::model::{classify, ActivationVector, Location, PrototypeBank};

/// Ground-truth parts overlapping one patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartAnnotation {
    pub image_id: String,
    pub location: Location,
    pub parts: BTreeSet<String>,
}

/// `1 / k`, with `k` the number of distinct part combinations.
pub fn pattern_purity<S: Borrow<BTreeSet<String>>>(patterns: &[S]) -> Result<f64> {
    if patterns.is_empty() {
        return Err(Error::Empty("pattern list"));
    }
    let distinct: BTreeSet<&BTreeSet<String>> = patterns.iter().map(Borrow::borrow).collect();
    Ok(1.0 / distinct.len() as f64)
}

/// Share of patches containing the most frequent part.
pub fn part_purity<S: Borrow<BTreeSet<String>>>(patch_parts: &[S]) -> Result<f64> {
    if patch_parts.is_empty() {
        return Err(Error::Empty("patch list"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for parts in patch_parts {
        for p in parts.borrow() {
            *counts.entry(p.as_str()).or_default() += 1;
        }
    }
    let best = counts.values().copied().max().unwrap_or(0);
    Ok(best as f64 / patch_parts.len() as f64)
}

/// Fraction of samples whose top class score (ties toward the smaller
/// class index) matches the label.
pub fn accuracy(bank: &PrototypeBank, samples: &[(ActivationVector, usize)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut correct = 0usize;
    for (p, label) in samples {
        if argmax(&classify(p, bank)?) == Some(*label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn set(parts: &[&str]) -> BTreeSet<String> {
        parts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn pattern_purity_examples() {
        assert_eq!(pattern_purity(&vec![set(&["wing"]); 10]).unwrap(), 1.0);
        let mut mixed = vec![set(&["wing", "leg"]); 5];
        mixed.extend(vec![set(&["leg"]); 5]);
        assert_eq!(pattern_purity(&mixed).unwrap(), 0.5);
        let abc = [set(&["a"]), set(&["b"]), set(&["c"]), set(&["a"])];
        assert!((pattern_purity(&abc).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(pattern_purity::<BTreeSet<String>>(&[]).is_err());
    }

    #[test]
    fn pattern_purity_ignores_label_order() {
        let a = [set(&["leg", "wing"]), set(&["wing", "leg"])];
        assert_eq!(pattern_purity(&a).unwrap(), 1.0);
    }

    #[test]
    fn part_purity_examples() {
        assert_eq!(part_purity(&vec![set(&["head", "eye"]); 4]).unwrap(), 1.0);
        let mut nine = vec![set(&["wing"]); 9];
        nine.push(set(&["tail"]));
        assert!((part_purity(&nine).unwrap() - 0.9).abs() < 1e-15);
        assert!(part_purity::<BTreeSet<String>>(&[]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let bank = PrototypeBank::new(
            Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let a = ActivationVector(vec![0.9, 0.1]);
        let b = ActivationVector(vec![0.1, 0.9]);
        assert_eq!(accuracy(&bank, &[(a.clone(), 0)]).unwrap(), 1.0);
        assert_eq!(accuracy(&bank, &[(a.clone(), 1), (b.clone(), 0)]).unwrap(), 0.0);
        // tie goes to class 0
        let tie = ActivationVector(vec![0.5, 0.5]);
        assert_eq!(accuracy(&bank, &[(tie, 0)]).unwrap(), 1.0);
        assert!(accuracy(&bank, &[]).is_err());
    }
}
