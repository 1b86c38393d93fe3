//! Synthetic workbench: banks and corpora with known part structure and
//! deliberately entangled prototypes.
//!
//! Geometry: `parts` orthonormal part directions plus, orthogonal to them,
//! a variant subspace. Every prototype concept is a cluster whose unit
//! center mixes one part direction with a variant direction; clusters that
//! share a part use mutually orthogonal variants. A consistent prototype's
//! kernel points at its single cluster, an entangled prototype's kernel at
//! the normalized mean of two clusters built on different parts.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::detect::top_activated_patches;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{dot, norm, round_to_f32, Matrix};
use crate::metrics::PartAnnotation;
use crate::model::{
    corpus_activations, ActivationVector, Corpus, ImageRecord, Location, PatchRecord,
    PrototypeBank,
};
use crate::split::{build_reference_set, default_reference_size, ConceptSets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub feature_width: usize,
    pub prototypes: usize,
    pub classes: usize,
    pub parts: usize,
    /// Patches planted per concept cluster.
    pub patches_per_cluster: usize,
    pub entangled_count: usize,
    /// Per-coordinate std-dev of patch features around their unit center.
    pub cluster_spread: f64,
    /// Weight of the variant direction in each cluster center.
    pub variant_weight: f64,
    /// Norm of patch feature centers.
    pub feature_norm: f64,
    /// Logit of a patch at its own consistent prototype (kernel norm times
    /// feature norm).
    pub logit_scale: f64,
    pub grid: (u32, u32),
    /// Size of the patch sets checked for planted concepts.
    pub patch_set_size: usize,
    pub min_clique: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            feature_width: 32,
            prototypes: 64,
            classes: 10,
            parts: 16,
            patches_per_cluster: 40,
            entangled_count: 8,
            cluster_spread: 0.02,
            variant_weight: 1.0,
            feature_norm: 10.0,
            logit_scale: 20.0,
            grid: (2, 2),
            patch_set_size: 10,
            min_clique: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn clusters(&self) -> usize {
        self.prototypes + self.entangled_count
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.prototypes < 2 {
            return bad("need at least 2 prototypes".into());
        }
        if self.entangled_count > self.prototypes {
            return bad("entangled_count exceeds prototypes".into());
        }
        if self.parts < 2 {
            return bad("need at least 2 parts".into());
        }
        if self.classes == 0 || self.classes > self.prototypes {
            return bad("classes must be in 1..=prototypes".into());
        }
        if self.parts >= self.feature_width {
            return bad("parts must leave room for variant dimensions".into());
        }
        let per_part = self.clusters().div_ceil(self.parts);
        if per_part > self.feature_width - self.parts {
            return bad(format!(
                "{per_part} clusters per part exceed {} variant dimensions",
                self.feature_width - self.parts
            ));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return bad("grid must be non-empty".into());
        }
        if self.patches_per_cluster < 2 * self.min_clique.max(1) {
            return bad("patches_per_cluster too small for two concepts".into());
        }
        if !(self.cluster_spread >= 0.0) || !(self.feature_norm > 0.0) || !(self.logit_scale > 0.0)
        {
            return bad("spread, feature_norm and logit_scale must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntangledPrototype {
    pub prototype: usize,
    pub cluster_a: usize,
    pub cluster_b: usize,
}

/// Generator ground truth, stored as a bundle sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub seed: u64,
    pub part_names: Vec<String>,
    /// Part index of every cluster.
    pub cluster_part: Vec<usize>,
    /// Prototype that owns every cluster.
    pub cluster_owner: Vec<usize>,
    /// Cluster of every corpus patch.
    pub patch_cluster: Vec<usize>,
    pub entangled: Vec<EntangledPrototype>,
}

impl SyntheticTruth {
    pub fn entangled_prototype(&self, prototype: usize) -> Option<&EntangledPrototype> {
        self.entangled.iter().find(|e| e.prototype == prototype)
    }

    pub fn is_entangled(&self, prototype: usize) -> bool {
        self.entangled_prototype(prototype).is_some()
    }

    /// Part set of a patch.
    pub fn patch_parts(&self, patch: usize) -> BTreeSet<String> {
        let part = self.cluster_part[self.patch_cluster[patch]];
        BTreeSet::from([self.part_names[part].clone()])
    }

    pub fn annotations(&self, corpus: &Corpus) -> Vec<PartAnnotation> {
        corpus
            .patches
            .iter()
            .enumerate()
            .map(|(i, p)| PartAnnotation {
                image_id: p.image_id.clone(),
                location: p.location,
                parts: self.patch_parts(i),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workbench {
    pub config: SynthConfig,
    pub bank: PrototypeBank,
    pub corpus: Corpus,
    pub truth: SyntheticTruth,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Gram–Schmidt: orthonormalizes `vectors` in place against `basis` and each
/// other, appending them to `basis`.
fn orthonormalize_into(basis: &mut Vec<Vec<f64>>, vectors: Vec<Vec<f64>>) {
    for mut v in vectors {
        for _ in 0..2 {
            for b in basis.iter() {
                let proj = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Generates a bank, corpus and ground truth. Deterministic per seed.
pub fn generate_bank(cfg: &SynthConfig) -> Result<Workbench> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.feature_width;
    let n_clusters = cfg.clusters();

    let mut parts = Vec::new();
    orthonormalize_into(&mut parts, (0..cfg.parts).map(|_| gaussian(&mut rng, c)).collect());

    // Entangled prototypes take clusters on parts (2i, 2i+1) mod P; the
    // remaining clusters cycle through the parts in shuffled order.
    let mut protos: Vec<usize> = (0..cfg.prototypes).collect();
    protos.shuffle(&mut rng);
    let mut entangled_ids: Vec<usize> = protos[..cfg.entangled_count].to_vec();
    entangled_ids.sort_unstable();

    let mut cluster_part = Vec::with_capacity(n_clusters);
    let mut cluster_owner = Vec::with_capacity(n_clusters);
    let mut entangled = Vec::new();
    for (i, &d) in entangled_ids.iter().enumerate() {
        let a = cluster_part.len();
        cluster_part.push((2 * i) % cfg.parts);
        cluster_part.push((2 * i + 1) % cfg.parts);
        cluster_owner.extend([d, d]);
        entangled.push(EntangledPrototype {
            prototype: d,
            cluster_a: a,
            cluster_b: a + 1,
        });
    }
    let mut consistent_parts: Vec<usize> = (0..cfg.prototypes - cfg.entangled_count)
        .map(|j| (j + 2 * cfg.entangled_count) % cfg.parts)
        .collect();
    consistent_parts.shuffle(&mut rng);
    let mut part_iter = consistent_parts.into_iter();
    for d in 0..cfg.prototypes {
        if entangled_ids.binary_search(&d).is_err() {
            cluster_part.push(part_iter.next().expect("one part per consistent prototype"));
            cluster_owner.push(d);
        }
    }

    // variant directions: orthogonal to all parts, orthogonal within a part
    let centers: Vec<Vec<f64>> = {
        let mut variant_of = vec![Vec::new(); n_clusters];
        for p in 0..cfg.parts {
            let members: Vec<usize> = (0..n_clusters).filter(|&k| cluster_part[k] == p).collect();
            let mut basis = parts.clone();
            orthonormalize_into(&mut basis, members.iter().map(|_| gaussian(&mut rng, c)).collect());
            for (k, v) in members.into_iter().zip(basis.into_iter().skip(cfg.parts)) {
                variant_of[k] = v;
            }
        }
        (0..n_clusters)
            .map(|k| {
                let u = &parts[cluster_part[k]];
                unit(
                    u.iter()
                        .zip(&variant_of[k])
                        .map(|(a, b)| a + cfg.variant_weight * b)
                        .collect(),
                )
            })
            .collect()
    };

    let kernel_norm = cfg.logit_scale / cfg.feature_norm;
    let mut kernels = Matrix::zeros(cfg.prototypes, c);
    for (k, &d) in cluster_owner.iter().enumerate() {
        if let Some(e) = entangled.iter().find(|e| e.prototype == d) {
            if e.cluster_a == k {
                let mixed: Vec<f64> = centers[e.cluster_a]
                    .iter()
                    .zip(&centers[e.cluster_b])
                    .map(|(a, b)| a + b)
                    .collect();
                kernels.row_mut(d).copy_from_slice(&unit(mixed));
            }
        } else {
            kernels.row_mut(d).copy_from_slice(&centers[k]);
        }
    }
    for d in 0..cfg.prototypes {
        kernels.row_mut(d).iter_mut().for_each(|x| *x *= kernel_norm);
        round_to_f32(kernels.row_mut(d));
    }

    // head: each prototype gets one primary class, sometimes a weak second
    let mut class_of = vec![0usize; cfg.prototypes];
    let mut order: Vec<usize> = (0..cfg.prototypes).collect();
    order.shuffle(&mut rng);
    for (i, &d) in order.iter().enumerate() {
        class_of[d] = i % cfg.classes;
    }
    let mut head = Matrix::zeros(cfg.prototypes, cfg.classes);
    for d in 0..cfg.prototypes {
        head.set(d, class_of[d], rng.random_range(1.0..2.0));
        if cfg.classes > 1 && rng.random_bool(0.25) {
            let mut other = rng.random_range(0..cfg.classes - 1);
            if other >= class_of[d] {
                other += 1;
            }
            head.set(d, other, rng.random_range(0.1..0.5));
        }
        round_to_f32(head.row_mut(d));
    }
    let class_names = (0..cfg.classes).map(|k| format!("class-{k:02}")).collect();
    let bank = PrototypeBank::new(kernels, head, class_names)?;

    // images: per class, a shuffled pool with patches_per_cluster slots per
    // cluster, cut into images of H*W patches
    let per_image = (cfg.grid.0 * cfg.grid.1) as usize;
    let mut images = Vec::new();
    let mut slots: Vec<(usize, usize)> = Vec::new(); // (image, cluster)
    for class in 0..cfg.classes {
        let clusters: Vec<usize> = (0..n_clusters)
            .filter(|&k| class_of[cluster_owner[k]] == class)
            .collect();
        let mut pool: Vec<usize> = clusters
            .iter()
            .flat_map(|&k| std::iter::repeat_n(k, cfg.patches_per_cluster))
            .collect();
        pool.shuffle(&mut rng);
        while !pool.len().is_multiple_of(per_image) {
            pool.push(clusters[rng.random_range(0..clusters.len())]);
        }
        for chunk in pool.chunks(per_image) {
            let image = images.len();
            images.push(ImageRecord {
                id: format!("img-{image:05}"),
                label: class,
            });
            slots.extend(chunk.iter().map(|&k| (image, k)));
        }
    }

    let patch_cluster: Vec<usize> = slots.iter().map(|&(_, k)| k).collect();
    let mut patches: Vec<PatchRecord> = slots
        .iter()
        .enumerate()
        .map(|(i, &(image, _))| {
            let cell = (i % per_image) as u32;
            let location = Location {
                h: cell / cfg.grid.1,
                w: cell % cfg.grid.1,
            };
            let mut p = PatchRecord::new(Vec::new(), images[image].id.clone(), location);
            p.thumbnail_ref = Some(format!("thumbs/{i:06}.pgm"));
            p
        })
        .collect();
    let draw = |rng: &mut ChaCha8Rng, k: usize| -> Vec<f64> {
        let mut f: Vec<f64> = centers[k]
            .iter()
            .map(|&x| cfg.feature_norm * (x + cfg.cluster_spread * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        round_to_f32(&mut f);
        f
    };
    for (p, &k) in patches.iter_mut().zip(&patch_cluster) {
        p.feature = draw(&mut rng, k);
    }

    let mut corpus = Corpus {
        grid: cfg.grid,
        patches,
        images,
    };
    let truth = SyntheticTruth {
        seed: cfg.seed,
        part_names: (0..cfg.parts).map(|p| format!("part-{p:02}")).collect(),
        cluster_part,
        cluster_owner,
        patch_cluster,
        entangled,
    };

    // Balance every entangled prototype so its patch set holds at least
    // `min_clique` patches from each concept: first shift the kernel's mix
    // of the two cluster centers, and if no mix works, redraw the noise of
    // both clusters.
    const MAX_REDRAWS: usize = 64;
    let mut bank = bank;
    for e in &truth.entangled {
        let mut attempt = 0;
        loop {
            let (a, b) = balance_mix(&corpus, &mut bank, &truth, e, &centers, kernel_norm, cfg)?;
            if a >= cfg.min_clique && b >= cfg.min_clique {
                break;
            }
            attempt += 1;
            if attempt > MAX_REDRAWS {
                return Err(Error::InvalidConfig(format!(
                    "could not balance entangled prototype {} ({a}+{b} planted patches)",
                    e.prototype
                )));
            }
            for (i, p) in corpus.patches.iter_mut().enumerate() {
                let k = truth.patch_cluster[i];
                if k == e.cluster_a || k == e.cluster_b {
                    p.feature = draw(&mut rng, k);
                }
            }
        }
    }

    Ok(Workbench {
        config: cfg.clone(),
        bank,
        corpus,
        truth,
    })
}

fn mixed_kernel(a: &[f64], b: &[f64], weight_a: f64, scale: f64) -> Vec<f64> {
    let mut k: Vec<f64> = unit(
        a.iter()
            .zip(b)
            .map(|(x, y)| weight_a * x + (1.0 - weight_a) * y)
            .collect(),
    )
    .into_iter()
    .map(|x| x * scale)
    .collect();
    round_to_f32(&mut k);
    k
}

/// Bisects the weight of cluster A in the entangled kernel until the patch
/// set splits as evenly as possible. The even mix is kept when it already
/// satisfies the minimum. Returns the final (A, B) counts.
fn balance_mix(
    corpus: &Corpus,
    bank: &mut PrototypeBank,
    truth: &SyntheticTruth,
    e: &EntangledPrototype,
    centers: &[Vec<f64>],
    scale: f64,
    cfg: &SynthConfig,
) -> Result<(usize, usize)> {
    let (ca, cb) = (&centers[e.cluster_a], &centers[e.cluster_b]);
    let set = |bank: &mut PrototypeBank, w: f64| -> Result<(usize, usize)> {
        bank.kernel_mut(e.prototype).copy_from_slice(&mixed_kernel(ca, cb, w, scale));
        planted_split(corpus, bank, truth, e, cfg.patch_set_size)
    };
    let (a, b) = set(bank, 0.5)?;
    if a >= cfg.min_clique && b >= cfg.min_clique {
        return Ok((a, b));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = (0.5, a, b);
    for _ in 0..24 {
        let mid = 0.5 * (lo + hi);
        let (a, b) = set(bank, mid)?;
        if a.abs_diff(b) < best.1.abs_diff(best.2) {
            best = (mid, a, b);
        }
        if a == b {
            break;
        }
        if a < b {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    set(bank, best.0)
}

/// Counts how many of an entangled prototype's top patches come from each
/// of its two clusters.
fn planted_split(
    corpus: &Corpus,
    bank: &PrototypeBank,
    truth: &SyntheticTruth,
    e: &EntangledPrototype,
    k: usize,
) -> Result<(usize, usize)> {
    let acts = corpus_activations(corpus, bank, Execution::Sequential)?;
    let top = top_activated_patches(corpus, &acts, e.prototype, k, true)?;
    let mut counts = (0, 0);
    for &j in &top.patches {
        let c = truth.patch_cluster[j];
        if c == e.cluster_a {
            counts.0 += 1;
        } else if c == e.cluster_b {
            counts.1 += 1;
        }
    }
    Ok(counts)
}

/// Concept sets from ground truth: candidates in cluster A form S1, in
/// cluster B form S2; S_r is gathered automatically from other prototypes.
pub fn oracle_labels(
    truth: &SyntheticTruth,
    corpus: &Corpus,
    activations: &[ActivationVector],
    bank: &PrototypeBank,
    prototype: usize,
    candidates: &[usize],
) -> Result<ConceptSets> {
    let e = truth.entangled_prototype(prototype).ok_or_else(|| {
        Error::InvalidConcepts(format!("prototype {prototype} is not entangled"))
    })?;
    let pick = |cluster: usize| -> Vec<usize> {
        candidates
            .iter()
            .copied()
            .filter(|&i| truth.patch_cluster[i] == cluster)
            .collect()
    };
    let (s1, s2) = (pick(e.cluster_a), pick(e.cluster_b));
    let exclude: Vec<&PatchRecord> = candidates.iter().map(|&i| &corpus.patches[i]).collect();
    let size = default_reference_size(s1.len(), s2.len());
    let sr = build_reference_set(corpus, activations, bank, prototype, size, &exclude)?;
    ConceptSets::from_indices(corpus, &s1, &s2, &sr.patches)
}
