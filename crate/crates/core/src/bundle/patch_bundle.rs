//! On-disk patch bundles.
//!
//! ```text
//! <bundle>/
//!   manifest.json      counts, schema version, CRC32 of every other file
//!   features.ppb       N x C patch features
//!   kernels.ppb        D x C prototype kernels
//!   head.ppb           D x K class weights
//!   activations.ppb    N x D per-location activations (optional)
//!   patches.json       class names, images, patch metadata
//!   annotations.json   part annotations per patch (optional)
//!   ground_truth.json  synthetic generator truth (optional)
//!   thumbs/            opaque thumbnail files (optional)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::block::{decode_matrix, encode_matrix};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::PartAnnotation;
use crate::model::{Corpus, ImageRecord, Location, PatchRecord, PrototypeBank};
use crate::synth::{SyntheticTruth, Workbench};

pub const BUNDLE_FORMAT: &str = "protosplit-bundle";
pub const SCHEMA_VERSION: &str = "1.0";
const SUPPORTED_MAJOR: u32 = 1;

const MANIFEST: &str = "manifest.json";
const FEATURES: &str = "features.ppb";
const KERNELS: &str = "kernels.ppb";
const HEAD: &str = "head.ppb";
const ACTIVATIONS: &str = "activations.ppb";
const PATCHES: &str = "patches.json";
const ANNOTATIONS: &str = "annotations.json";
const GROUND_TRUTH: &str = "ground_truth.json";
const THUMBS: &str = "thumbs";

/// A split applied to the bank: `original` was duplicated into `duplicate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitLineage {
    pub original: usize,
    pub duplicate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub crc32: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub schema_version: String,
    pub feature_width: usize,
    pub prototypes: usize,
    pub classes: usize,
    pub grid: (u32, u32),
    pub patches: usize,
    pub images: usize,
    pub has_activations: bool,
    pub has_annotations: bool,
    pub has_ground_truth: bool,
    #[serde(default)]
    pub lineage: Vec<SplitLineage>,
    pub files: BTreeMap<String, FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PatchMeta {
    image_id: String,
    h: u32,
    w: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    thumbnail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    class_names: Vec<String>,
    images: Vec<ImageRecord>,
    patches: Vec<PatchMeta>,
}

/// In-memory bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBundle {
    pub bank: PrototypeBank,
    pub corpus: Corpus,
    pub annotations: Option<Vec<PartAnnotation>>,
    pub truth: Option<SyntheticTruth>,
    pub lineage: Vec<SplitLineage>,
    /// Thumbnail bytes keyed by `thumbnail_ref`.
    pub thumbnails: BTreeMap<String, Vec<u8>>,
}

impl PatchBundle {
    pub fn new(bank: PrototypeBank, corpus: Corpus) -> Self {
        Self {
            bank,
            corpus,
            annotations: None,
            truth: None,
            lineage: Vec::new(),
            thumbnails: BTreeMap::new(),
        }
    }

    pub fn from_workbench(wb: &Workbench) -> Self {
        Self {
            annotations: Some(wb.truth.annotations(&wb.corpus)),
            truth: Some(wb.truth.clone()),
            ..Self::new(wb.bank.clone(), wb.corpus.clone())
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bank.validate()?;
        self.corpus.validate()?;
        if let Some(c) = self.corpus.feature_width() {
            if c != self.bank.feature_width() {
                return Err(Error::ShapeMismatch {
                    context: "corpus feature width vs kernel width",
                    expected: self.bank.feature_width(),
                    found: c,
                });
            }
        }
        if let Some(a) = &self.annotations {
            if a.len() != self.corpus.patches.len() {
                return Err(Error::ShapeMismatch {
                    context: "annotations vs patches",
                    expected: self.corpus.patches.len(),
                    found: a.len(),
                });
            }
        }
        if let Some(t) = &self.truth {
            if t.patch_cluster.len() != self.corpus.patches.len() {
                return Err(Error::ShapeMismatch {
                    context: "ground truth vs patches",
                    expected: self.corpus.patches.len(),
                    found: t.patch_cluster.len(),
                });
            }
        }
        for l in &self.lineage {
            self.bank.check_prototype(l.original)?;
            self.bank.check_prototype(l.duplicate)?;
        }
        Ok(())
    }

    /// Part sets per patch, from the annotation sidecar.
    pub fn patch_parts(&self) -> Option<Vec<std::collections::BTreeSet<String>>> {
        self.annotations
            .as_ref()
            .map(|a| a.iter().map(|x| x.parts.clone()).collect())
    }

    /// Placeholder grayscale thumbnails (binary PGM) rendered from features.
    pub fn render_feature_thumbnails(&mut self) {
        for p in &self.corpus.patches {
            let Some(name) = &p.thumbnail_ref else { continue };
            let max = p.feature.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-12);
            let width = 8usize;
            let height = p.feature.len().div_ceil(width).max(1);
            let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
            for i in 0..width * height {
                let v = p.feature.get(i).copied().unwrap_or(0.0);
                bytes.push((127.5 + 127.5 * v / max).round() as u8);
            }
            self.thumbnails.insert(name.clone(), bytes);
        }
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<u32> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        io(parent, fs::create_dir_all(parent))?;
    }
    let mut file = io(&path, fs::File::create(&path))?;
    io(&path, std::io::Write::write_all(&mut file, bytes))?;
    io(&path, file.sync_all())?;
    Ok(crc32fast::hash(bytes))
}

fn temp_sibling(path: &Path, tag: &str) -> Result<PathBuf> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("bundle path {} has no name", path.display())))?
        .to_string_lossy()
        .into_owned();
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    Ok(parent.join(format!(".{name}.{tag}-{}-{nanos}", std::process::id())))
}

/// Writes `bundle` to directory `path`, replacing any existing bundle. The
/// directory is assembled under a temporary name and renamed into place,
/// so a failure never leaves a partial bundle at `path`.
pub fn write_bundle(bundle: &PatchBundle, path: &Path) -> Result<()> {
    bundle.validate()?;
    let tmp = temp_sibling(path, "tmp")?;
    let result = write_into(bundle, &tmp).and_then(|()| swap_into_place(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result
}

fn swap_into_place(tmp: &Path, path: &Path) -> Result<()> {
    if path.exists() {
        let old = temp_sibling(path, "old")?;
        io(path, fs::rename(path, &old))?;
        if let Err(e) = fs::rename(tmp, path) {
            let _ = fs::rename(&old, path);
            return Err(Error::io(path, e));
        }
        let _ = fs::remove_dir_all(&old);
    } else {
        io(path, fs::rename(tmp, path))?;
    }
    Ok(())
}

fn write_into(bundle: &PatchBundle, dir: &Path) -> Result<()> {
    io(dir, fs::create_dir_all(dir))?;
    let corpus = &bundle.corpus;
    let bank = &bundle.bank;
    let n = corpus.patches.len();
    let c = bank.feature_width();
    let mut files = BTreeMap::new();
    let mut put = |key: &str, file: &str, bytes: Vec<u8>, dims: Option<Vec<u32>>| -> Result<()> {
        let crc32 = write_file(dir, file, &bytes)?;
        files.insert(
            key.to_string(),
            FileEntry {
                file: file.to_string(),
                crc32,
                dims,
            },
        );
        Ok(())
    };

    let mut features = Vec::with_capacity(n * c);
    for p in &corpus.patches {
        features.extend_from_slice(&p.feature);
    }
    let features = Matrix::from_vec(n, c, features)?;
    put("features", FEATURES, encode_matrix(&features), Some(vec![n as u32, c as u32]))?;
    put(
        "kernels",
        KERNELS,
        encode_matrix(bank.kernels()),
        Some(vec![bank.num_prototypes() as u32, c as u32]),
    )?;
    put(
        "head",
        HEAD,
        encode_matrix(bank.head()),
        Some(vec![bank.num_prototypes() as u32, bank.num_classes() as u32]),
    )?;

    let has_activations = n > 0
        && corpus.patches.iter().all(|p| {
            p.activation_cache
                .as_ref()
                .is_some_and(|a| a.len() == bank.num_prototypes())
        });
    if has_activations {
        let d = bank.num_prototypes();
        let data = corpus
            .patches
            .iter()
            .flat_map(|p| p.activation_cache.clone().unwrap_or_default())
            .collect();
        let acts = Matrix::from_vec(n, d, data)?;
        put("activations", ACTIVATIONS, encode_matrix(&acts), Some(vec![n as u32, d as u32]))?;
    }

    let meta = Metadata {
        class_names: bank.class_names().to_vec(),
        images: corpus.images.clone(),
        patches: corpus
            .patches
            .iter()
            .map(|p| PatchMeta {
                image_id: p.image_id.clone(),
                h: p.location.h,
                w: p.location.w,
                thumbnail: p.thumbnail_ref.clone(),
            })
            .collect(),
    };
    put("patches", PATCHES, serde_json::to_vec_pretty(&meta)?, None)?;
    if let Some(a) = &bundle.annotations {
        put("annotations", ANNOTATIONS, serde_json::to_vec_pretty(a)?, None)?;
    }
    if let Some(t) = &bundle.truth {
        put("ground_truth", GROUND_TRUTH, serde_json::to_vec(t)?, None)?;
    }
    for (name, bytes) in &bundle.thumbnails {
        let rel = thumbnail_path(name)?;
        put(&format!("thumb:{name}"), &rel, bytes.clone(), None)?;
    }

    let manifest = Manifest {
        format: BUNDLE_FORMAT.to_string(),
        schema_version: SCHEMA_VERSION.to_string(),
        feature_width: c,
        prototypes: bank.num_prototypes(),
        classes: bank.num_classes(),
        grid: corpus.grid,
        patches: n,
        images: corpus.images.len(),
        has_activations,
        has_annotations: bundle.annotations.is_some(),
        has_ground_truth: bundle.truth.is_some(),
        lineage: bundle.lineage.clone(),
        files,
    };
    write_file(dir, MANIFEST, &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Thumbnails live under `thumbs/`; references are relative and may not
/// escape it.
fn thumbnail_path(name: &str) -> Result<String> {
    let rel = name.strip_prefix("thumbs/").unwrap_or(name);
    if rel.is_empty() || rel.contains("..") || rel.starts_with('/') || rel.contains('\\') {
        return Err(Error::Validation(format!("invalid thumbnail reference `{name}`")));
    }
    Ok(format!("{THUMBS}/{rel}"))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mpath = path.join(MANIFEST);
    let bytes = io(&mpath, fs::read(&mpath))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(Error::Validation(format!("unknown format `{}`", manifest.format)));
    }
    let major = manifest
        .schema_version
        .split('.')
        .next()
        .and_then(|m| m.parse::<u32>().ok())
        .ok_or_else(|| Error::UnsupportedSchema(manifest.schema_version.clone()))?;
    if major != SUPPORTED_MAJOR {
        return Err(Error::UnsupportedSchema(manifest.schema_version.clone()));
    }
    Ok(manifest)
}

fn read_checked(dir: &Path, manifest: &Manifest, key: &str) -> Result<Option<Vec<u8>>> {
    let Some(entry) = manifest.files.get(key) else {
        return Ok(None);
    };
    let path = dir.join(&entry.file);
    let bytes = io(&path, fs::read(&path))?;
    if crc32fast::hash(&bytes) != entry.crc32 {
        return Err(Error::Checksum {
            block: key.to_string(),
        });
    }
    Ok(Some(bytes))
}

fn required(dir: &Path, manifest: &Manifest, key: &str) -> Result<Vec<u8>> {
    read_checked(dir, manifest, key)?
        .ok_or_else(|| Error::Validation(format!("manifest lists no `{key}` block")))
}

fn expect_dims(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.rows() != rows || m.cols() != cols {
        return Err(Error::Validation(format!(
            "block `{name}` is {}x{}, manifest says {rows}x{cols}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

/// Reads and fully validates a bundle directory.
pub fn read_bundle(path: &Path) -> Result<PatchBundle> {
    let manifest = read_manifest(path)?;
    let (n, c, d, k) = (
        manifest.patches,
        manifest.feature_width,
        manifest.prototypes,
        manifest.classes,
    );

    let features = decode_matrix("features", &required(path, &manifest, "features")?)?;
    expect_dims("features", &features, n, c)?;
    let kernels = decode_matrix("kernels", &required(path, &manifest, "kernels")?)?;
    expect_dims("kernels", &kernels, d, c)?;
    let head = decode_matrix("head", &required(path, &manifest, "head")?)?;
    expect_dims("head", &head, d, k)?;
    let activations = match read_checked(path, &manifest, "activations")? {
        Some(bytes) => {
            let m = decode_matrix("activations", &bytes)?;
            expect_dims("activations", &m, n, d)?;
            Some(m)
        }
        None => None,
    };

    let meta: Metadata = serde_json::from_slice(&required(path, &manifest, "patches")?)?;
    if meta.patches.len() != n || meta.images.len() != manifest.images {
        return Err(Error::Validation(format!(
            "metadata lists {} patches / {} images, manifest says {n} / {}",
            meta.patches.len(),
            meta.images.len(),
            manifest.images
        )));
    }
    let patches = meta
        .patches
        .into_iter()
        .enumerate()
        .map(|(i, m)| PatchRecord {
            feature: features.row(i).to_vec(),
            image_id: m.image_id,
            location: Location { h: m.h, w: m.w },
            thumbnail_ref: m.thumbnail,
            activation_cache: activations.as_ref().map(|a| a.row(i).to_vec()),
        })
        .collect();
    let corpus = Corpus {
        grid: manifest.grid,
        patches,
        images: meta.images,
    };
    let bank = PrototypeBank::new(kernels, head, meta.class_names)?;

    let annotations = read_checked(path, &manifest, "annotations")?
        .map(|b| serde_json::from_slice(&b))
        .transpose()?;
    let truth = read_checked(path, &manifest, "ground_truth")?
        .map(|b| serde_json::from_slice(&b))
        .transpose()?;
    let mut thumbnails = BTreeMap::new();
    for key in manifest.files.keys().filter(|k| k.starts_with("thumb:")) {
        let bytes = required(path, &manifest, key)?;
        thumbnails.insert(key["thumb:".len()..].to_string(), bytes);
    }

    let bundle = PatchBundle {
        bank,
        corpus,
        annotations,
        truth,
        lineage: manifest.lineage.clone(),
        thumbnails,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes any serializable report as pretty JSON via temp file + rename.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let tmp = temp_sibling(path, "tmp")?;
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    let res = io(&tmp, fs::write(&tmp, &bytes)).and_then(|()| io(path, fs::rename(&tmp, path)));
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = io(path, fs::read(path))?;
    Ok(serde_json::from_slice(&bytes)?)
}
