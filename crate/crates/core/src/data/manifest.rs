//! Dataset manifests: which image files exist, their class, domain and split.
//!
//! On disk a manifest is JSON:
//!
//! ```json
//! { "size": 64, "channels": 3,
//!   "entries": [ { "path": "real/00000.png", "label": "real",
//!                  "domain": "patch-splice", "split": "train" } ] }
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, io_error, Error, Result};
use crate::model::ClassLabel;
use crate::parallel::par_map;
use crate::residual::{residual_batch, ResidualConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: ClassLabel,
    pub domain: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub size: usize,
    pub channels: usize,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(size: usize, channels: usize, root: impl Into<PathBuf>) -> Self {
        Self {
            size,
            channels,
            entries: Vec::new(),
            root: root.into(),
        }
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Indices into `entries` of the given split, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, split: Split, label: ClassLabel) -> usize {
        self.entries
            .iter()
            .filter(|e| e.split == split && e.label == label)
            .count()
    }

    pub fn domains(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for e in &self.entries {
            if !seen.contains(&e.domain) {
                seen.push(e.domain.clone());
            }
        }
        seen
    }

    /// Checks channel count and that no file appears twice.
    pub fn validate(&self) -> Result<()> {
        if !(self.channels == 1 || self.channels == 3) {
            return Err(config(format!(
                "manifest channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.size == 0 {
            return Err(config("manifest image size must be positive"));
        }
        let mut seen: HashMap<PathBuf, Split> = HashMap::new();
        for e in &self.entries {
            if let Some(prev) = seen.insert(self.resolve(e), e.split) {
                let message = if prev == e.split {
                    format!("listed twice in split {prev}")
                } else {
                    format!("listed in both {prev} and {} splits", e.split)
                };
                return Err(Error::Validation {
                    entry: e.path.clone(),
                    message,
                });
            }
        }
        Ok(())
    }

    /// Fails unless both classes are present in `split` for every domain.
    pub fn require_both_classes(&self, split: Split) -> Result<()> {
        for domain in self.domains() {
            for label in [ClassLabel::Real, ClassLabel::Fake] {
                let present = self
                    .entries
                    .iter()
                    .any(|e| e.split == split && e.domain == domain && e.label == label);
                if !present {
                    return Err(config(format!(
                        "domain {domain:?} has no {label} samples in the {split} split"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(io_error(path))
    }

    /// Decodes the images of `split` at `indices` (positions within that
    /// split) into a `[N, C, H, W]` tensor with values in `[0, 1]`.
    pub fn load_batch(&self, split: Split, indices: &[usize]) -> Result<Tensor> {
        let members = self.split_indices(split);
        let entries = indices
            .iter()
            .map(|&i| {
                members.get(i).map(|&e| &self.entries[e]).ok_or_else(|| {
                    contract(format!(
                        "index {i} out of range for {split} split of {} entries",
                        members.len()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.load_entries(&entries)
    }

    pub fn load_entries(&self, entries: &[&ManifestEntry]) -> Result<Tensor> {
        if entries.is_empty() {
            return Err(contract("cannot load an empty batch"));
        }
        let images = par_map(entries, |_, e| self.load_image(e));
        let images = images.into_iter().collect::<Result<Vec<_>>>()?;
        Tensor::stack(&images.iter().collect::<Vec<_>>())
    }

    /// Decodes one image as `[C, H, W]` with values `byte / 255`.
    pub fn load_image(&self, entry: &ManifestEntry) -> Result<Tensor> {
        let path = self.resolve(entry);
        if !path.exists() {
            return Err(Error::Validation {
                entry: entry.path.clone(),
                message: format!("file {} does not exist", path.display()),
            });
        }
        let img = image::open(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w != self.size || h != self.size {
            return Err(Error::Validation {
                entry: entry.path.clone(),
                message: format!("image is {w}x{h}, manifest declares {0}x{0}", self.size),
            });
        }
        let plane = w * h;
        let mut data = vec![0.0f32; self.channels * plane];
        if self.channels == 3 {
            for (i, px) in img.to_rgb8().pixels().enumerate() {
                for c in 0..3 {
                    data[c * plane + i] = px.0[c] as f32 / 255.0;
                }
            }
        } else {
            for (i, px) in img.to_luma8().pixels().enumerate() {
                data[i] = px.0[0] as f32 / 255.0;
            }
        }
        Tensor::new(vec![self.channels, h, w], data)
    }

    /// Loads every sample of `split` and preprocesses it for the network.
    pub fn load_split(&self, split: Split, residual: &ResidualConfig) -> Result<SampleSet> {
        let idx = self.split_indices(split);
        let entries: Vec<&ManifestEntry> = idx.iter().map(|&i| &self.entries[i]).collect();
        SampleSet::from_entries(self, &entries, residual)
    }
}

/// Reads and validates a manifest file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.validate()?;
    Ok(manifest)
}

/// Union of several manifests with paths made absolute. Split assignments and
/// domain tags are kept; a file listed more than once is kept only the first
/// time.
pub fn merge_sources(manifests: &[DatasetManifest]) -> Result<DatasetManifest> {
    let first = manifests
        .first()
        .ok_or_else(|| config("nothing to merge"))?;
    let mut merged = DatasetManifest::new(first.size, first.channels, PathBuf::new());
    let mut seen = HashSet::new();
    for m in manifests {
        if m.size != first.size || m.channels != first.channels {
            return Err(config(format!(
                "cannot merge {0}x{0}x{1} with {2}x{2}x{3} images",
                first.size, first.channels, m.size, m.channels
            )));
        }
        for e in &m.entries {
            let path = absolutize(&m.resolve(e));
            if !seen.insert(path.clone()) {
                log::warn!("dropping duplicate manifest entry {}", path.display());
                continue;
            }
            merged.entries.push(ManifestEntry {
                path: path.to_string_lossy().into_owned(),
                ..e.clone()
            });
        }
    }
    merged.validate()?;
    Ok(merged)
}

fn absolutize(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Preprocessed samples held in memory.
#[derive(Clone, Debug)]
pub struct SampleSet {
    /// `[N, C, H, W]` network inputs (residuals, or the passthrough mapping).
    pub inputs: Tensor,
    pub labels: Vec<ClassLabel>,
    /// Manifest paths, used as sample ids.
    pub ids: Vec<String>,
    pub domains: Vec<String>,
}

impl SampleSet {
    pub fn from_entries(
        manifest: &DatasetManifest,
        entries: &[&ManifestEntry],
        residual: &ResidualConfig,
    ) -> Result<Self> {
        let images = manifest.load_entries(entries)?;
        Ok(Self {
            inputs: residual_batch(&images, residual)?,
            labels: entries.iter().map(|e| e.label).collect(),
            ids: entries.iter().map(|e| e.path.clone()).collect(),
            domains: entries.iter().map(|e| e.domain.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, label: ClassLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Inputs and labels of the samples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<ClassLabel>)> {
        let s = self.inputs.shape();
        let per: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(contract(format!("sample {i} out of range")));
            }
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = s.to_vec();
        shape[0] = indices.len();
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// A new set holding the samples at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Result<SampleSet> {
        let (inputs, labels) = self.gather(indices)?;
        Ok(SampleSet {
            inputs,
            labels,
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            domains: indices.iter().map(|&i| self.domains[i].clone()).collect(),
        })
    }

    /// Concatenation of two sets with matching sample shapes.
    pub fn concat(&self, other: &SampleSet) -> Result<SampleSet> {
        if self.inputs.shape()[1..] != other.inputs.shape()[1..] {
            return Err(contract("cannot concatenate sample sets of different shapes"));
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] += other.len();
        let data = [self.inputs.data(), other.inputs.data()].concat();
        Ok(SampleSet {
            inputs: Tensor::new(shape, data)?,
            labels: [self.labels.clone(), other.labels.clone()].concat(),
            ids: [self.ids.clone(), other.ids.clone()].concat(),
            domains: [self.domains.clone(), other.domains.clone()].concat(),
        })
    }
}

#[cfg(test)]
mod tests;
