//! Frozen model state and the forward pass from patch features to class
//! scores: per-location kernel logits, a softmax over prototype channels,
//! max-pooling over locations and a non-negative linear head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{argmax, dot, Matrix};

/// Grid cell of a patch inside its image's feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Location {
    pub h: u32,
    pub w: u32,
}

/// One spatial cell of the backbone output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub feature: Vec<f64>,
    pub image_id: String,
    pub location: Location,
    pub thumbnail_ref: Option<String>,
    /// Per-location softmax over prototype channels, when precomputed.
    pub activation_cache: Option<Vec<f64>>,
}

impl PatchRecord {
    pub fn new(feature: Vec<f64>, image_id: impl Into<String>, location: Location) -> Self {
        Self {
            feature,
            image_id: image_id.into(),
            location,
            thumbnail_ref: None,
            activation_cache: None,
        }
    }

    /// Identity used for set disjointness: `(image_id, location)`.
    pub fn key(&self) -> (&str, Location) {
        (&self.image_id, self.location)
    }

    pub fn validate(&self, grid: (u32, u32)) -> Result<()> {
        if self.feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("patch feature"));
        }
        if self.location.h >= grid.0 || self.location.w >= grid.1 {
            return Err(Error::Validation(format!(
                "patch location ({}, {}) outside grid {}x{}",
                self.location.h, self.location.w, grid.0, grid.1
            )));
        }
        if let Some(cache) = &self.activation_cache {
            let sum: f64 = cache.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || cache.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation(format!(
                    "activation cache sums to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Ground-truth class index.
    pub label: usize,
}

/// All patches of a bundle together with the images they were cut from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    /// Feature-map grid `(H, W)`.
    pub grid: (u32, u32),
    pub patches: Vec<PatchRecord>,
    pub images: Vec<ImageRecord>,
}

impl Corpus {
    pub fn feature_width(&self) -> Option<usize> {
        self.patches.first().map(|p| p.feature.len())
    }

    /// Patch indices grouped per image, in image order. Patches whose image
    /// is not listed are skipped.
    pub fn patches_by_image(&self) -> Vec<Vec<usize>> {
        let index: BTreeMap<&str, usize> = self
            .images
            .iter()
            .enumerate()
            .map(|(i, im)| (im.id.as_str(), i))
            .collect();
        let mut groups = vec![Vec::new(); self.images.len()];
        for (p, patch) in self.patches.iter().enumerate() {
            if let Some(&i) = index.get(patch.image_id.as_str()) {
                groups[i].push(p);
            }
        }
        groups
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.feature_width().unwrap_or(0);
        for p in &self.patches {
            if p.feature.len() != width {
                return Err(Error::ShapeMismatch {
                    context: "patch feature width",
                    expected: width,
                    found: p.feature.len(),
                });
            }
            p.validate(self.grid)?;
        }
        Ok(())
    }
}

/// Prototype kernels (one row per channel) plus the non-negative head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    kernels: Matrix,
    head: Matrix,
    class_names: Vec<String>,
}

impl PrototypeBank {
    pub fn new(kernels: Matrix, head: Matrix, class_names: Vec<String>) -> Result<Self> {
        let bank = Self {
            kernels,
            head,
            class_names,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.rows() < 2 {
            return Err(Error::Validation(format!(
                "bank needs at least 2 prototypes, has {}",
                self.kernels.rows()
            )));
        }
        if self.head.rows() != self.kernels.rows() {
            return Err(Error::ShapeMismatch {
                context: "head rows vs kernel rows",
                expected: self.kernels.rows(),
                found: self.head.rows(),
            });
        }
        if self.class_names.len() != self.head.cols() {
            return Err(Error::ShapeMismatch {
                context: "class names vs head columns",
                expected: self.head.cols(),
                found: self.class_names.len(),
            });
        }
        if self.kernels.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prototype kernels"));
        }
        if self.head.as_slice().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Validation("head must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn num_prototypes(&self) -> usize {
        self.kernels.rows()
    }

    pub fn feature_width(&self) -> usize {
        self.kernels.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.head.cols()
    }

    pub fn kernels(&self) -> &Matrix {
        &self.kernels
    }

    pub fn head(&self) -> &Matrix {
        &self.head
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn kernel(&self, d: usize) -> &[f64] {
        self.kernels.row(d)
    }

    pub(crate) fn kernel_mut(&mut self, d: usize) -> &mut [f64] {
        self.kernels.row_mut(d)
    }

    pub(crate) fn head_mut(&mut self) -> &mut Matrix {
        &mut self.head
    }

    /// A prototype is in use when its head row carries any weight.
    pub fn in_use(&self, d: usize) -> bool {
        self.head.row(d).iter().any(|&w| w > 0.0)
    }

    pub fn check_prototype(&self, d: usize) -> Result<()> {
        if d >= self.num_prototypes() {
            return Err(Error::OutOfRange {
                what: "prototype",
                index: d,
                len: self.num_prototypes(),
            });
        }
        Ok(())
    }
}

/// Prototype activations, either per location or max-pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActivationVector(pub Vec<f64>);

impl ActivationVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn top_channel(&self) -> Option<usize> {
        argmax(&self.0)
    }
}

/// Per-channel logits of one patch: the dot product of its feature with
/// every prototype kernel (1x1 convolution).
pub fn channel_logits(feature: &[f64], bank: &PrototypeBank) -> Result<Vec<f64>> {
    if feature.len() != bank.feature_width() {
        return Err(Error::ShapeMismatch {
            context: "patch feature vs kernel width",
            expected: bank.feature_width(),
            found: feature.len(),
        });
    }
    Ok(bank.kernels.iter_rows().map(|k| dot(feature, k)).collect())
}

/// Softmax over prototype channels with max subtraction.
pub fn softmax_channels(logits: &[f64]) -> Result<ActivationVector> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(ActivationVector(softmax_unchecked(logits)))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Per-location activations of a single patch feature.
pub fn patch_activations(feature: &[f64], bank: &PrototypeBank) -> Result<ActivationVector> {
    softmax_channels(&channel_logits(feature, bank)?)
}

/// Coordinatewise max over locations.
pub fn pool_activations(per_location: &[ActivationVector]) -> Result<ActivationVector> {
    let first = per_location.first().ok_or(Error::Empty("location list"))?;
    let mut pooled = first.0.clone();
    for v in &per_location[1..] {
        if v.len() != pooled.len() {
            return Err(Error::ShapeMismatch {
                context: "pooled activation length",
                expected: pooled.len(),
                found: v.len(),
            });
        }
        for (p, &x) in pooled.iter_mut().zip(&v.0) {
            *p = p.max(x);
        }
    }
    Ok(ActivationVector(pooled))
}

/// Class scores `o = p Ω`.
pub fn classify(pooled: &ActivationVector, bank: &PrototypeBank) -> Result<Vec<f64>> {
    if pooled.len() != bank.num_prototypes() {
        return Err(Error::ShapeMismatch {
            context: "activation length vs head rows",
            expected: bank.num_prototypes(),
            found: pooled.len(),
        });
    }
    let mut scores = vec![0.0; bank.num_classes()];
    for (d, &p) in pooled.0.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (s, &w) in scores.iter_mut().zip(bank.head.row(d)) {
            *s += p * w;
        }
    }
    Ok(scores)
}

/// Per-location activations of every patch in the corpus.
pub fn corpus_activations(
    corpus: &Corpus,
    bank: &PrototypeBank,
    exec: Execution,
) -> Result<Vec<ActivationVector>> {
    exec.map_slice(&corpus.patches, |p| patch_activations(&p.feature, bank))
        .into_iter()
        .collect()
}

/// Max-pooled activation and class label of every image.
pub fn pooled_image_activations(
    corpus: &Corpus,
    per_patch: &[ActivationVector],
) -> Result<Vec<(ActivationVector, usize)>> {
    corpus
        .patches_by_image()
        .into_iter()
        .zip(&corpus.images)
        .filter(|(idx, _)| !idx.is_empty())
        .map(|(idx, image)| {
            let acts: Vec<ActivationVector> = idx.iter().map(|&i| per_patch[i].clone()).collect();
            Ok((pool_activations(&acts)?, image.label))
        })
        .collect()
}
