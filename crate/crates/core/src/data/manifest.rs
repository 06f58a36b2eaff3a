use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bag::{read_feature_bag, PatchBag};
use super::binary::{self, Sidecar};
use crate::error::{MuseError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub slide_id: String,
    /// Bag file, relative to the manifest's directory.
    pub path: String,
    pub label: usize,
    pub split: Split,
}

/// Top-level dataset index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub d: usize,
    pub entries: Vec<ManifestEntry>,
    /// Optional `|C| x d` tensor used to initialise the category semantics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_embeddings: Option<String>,
    /// Optional knowledge-base directory, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_base: Option<String>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Self = binary::read_json(path)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binary::write_json(path, self)
    }

    /// Structural checks that do not touch bag files.
    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(MuseError::data("manifest needs at least two classes"));
        }
        if self.d == 0 {
            return Err(MuseError::data("manifest declares d = 0"));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.slide_id.as_str()) {
                return Err(MuseError::data(format!("duplicate slide_id {}", e.slide_id)));
            }
            if e.label >= self.class_names.len() {
                return Err(MuseError::data(format!(
                    "slide {} has label {} outside [0, {})",
                    e.slide_id,
                    e.label,
                    self.class_names.len()
                )));
            }
        }
        for split in Split::ALL {
            for (c, name) in self.class_names.iter().enumerate() {
                if !self.entries.iter().any(|e| e.split == split && e.label == c) {
                    return Err(MuseError::data(format!(
                        "class {name} has no slides in the {split:?} split"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// A manifest with every bag loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub bags: Vec<PatchBag>,
    index: BTreeMap<String, usize>,
    embeddings: Option<ndarray::Array2<f64>>,
}

impl Dataset {
    /// Loads and checks every referenced bag against the manifest.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut bags = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let bin = root.join(&e.path);
            if !bin.exists() {
                return Err(MuseError::data(format!("missing bag file {}", bin.display())));
            }
            let sidecar: Sidecar = binary::read_sidecar(&binary::sidecar_path(&bin))?;
            if sidecar.d != manifest.d {
                return Err(MuseError::data(format!(
                    "{}: d = {} but manifest declares {}",
                    e.slide_id, sidecar.d, manifest.d
                )));
            }
            if sidecar.slide_id != e.slide_id || sidecar.label != e.label {
                return Err(MuseError::data(format!(
                    "{}: sidecar identity disagrees with manifest",
                    e.slide_id
                )));
            }
            bags.push(read_feature_bag(&bin, &sidecar)?);
        }
        Ok(Self::from_parts(manifest, root, bags))
    }

    pub fn from_parts(manifest: DatasetManifest, root: PathBuf, bags: Vec<PatchBag>) -> Self {
        let index = bags.iter().enumerate().map(|(i, b)| (b.slide_id.clone(), i)).collect();
        Self { manifest, root, bags, index, embeddings: None }
    }

    /// Attaches in-memory class embeddings, which then take precedence over
    /// the file named by the manifest.
    pub fn with_class_embeddings(mut self, embeddings: ndarray::Array2<f64>) -> Result<Self> {
        if embeddings.dim() != (self.manifest.num_classes(), self.manifest.d) {
            return Err(MuseError::data(format!(
                "class embeddings are {}x{}, expected {}x{}",
                embeddings.nrows(),
                embeddings.ncols(),
                self.manifest.num_classes(),
                self.manifest.d
            )));
        }
        self.embeddings = Some(embeddings);
        Ok(self)
    }

    pub fn bag(&self, slide_id: &str) -> Option<&PatchBag> {
        self.index.get(slide_id).map(|&i| &self.bags[i])
    }

    pub fn split(&self, split: Split) -> Vec<&PatchBag> {
        self.manifest.entries_in(split).filter_map(|e| self.bag(&e.slide_id)).collect()
    }

    /// Class-embedding rows declared by the manifest, if any.
    pub fn class_embeddings(&self) -> Result<Option<ndarray::Array2<f64>>> {
        if let Some(e) = &self.embeddings {
            return Ok(Some(e.clone()));
        }
        let Some(rel) = &self.manifest.class_embeddings else {
            return Ok(None);
        };
        let bin = self.root.join(rel);
        let sidecar = binary::read_sidecar(&binary::sidecar_path(&bin))?;
        if sidecar.n != self.manifest.num_classes() || sidecar.d != self.manifest.d {
            return Err(MuseError::data(format!(
                "class embeddings are {}x{}, expected {}x{}",
                sidecar.n,
                sidecar.d,
                self.manifest.num_classes(),
                self.manifest.d
            )));
        }
        Ok(Some(binary::read_f32(&bin, &sidecar)?.mapv(f64::from)))
    }

    pub fn knowledge_base_dir(&self) -> Option<PathBuf> {
        self.manifest.knowledge_base.as_ref().map(|p| self.root.join(p))
    }
}

/// Stable 64-bit key for ordering a slide within its class.
pub fn split_key(slide_id: &str, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(slide_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Stratified 6:2:2 assignment: within each class, slides are ordered by
/// [`split_key`] and cut into train/val/test with `floor(n/5)` slides in each of
/// val and test.
pub fn assign_splits(items: &[(String, usize)], num_classes: usize, seed: u64) -> Result<Vec<Split>> {
    let mut out = vec![Split::Train; items.len()];
    for c in 0..num_classes {
        let mut members: Vec<(u64, &str, usize)> = items
            .iter()
            .enumerate()
            .filter(|(_, (_, label))| *label == c)
            .map(|(i, (id, _))| (split_key(id, seed), id.as_str(), i))
            .collect();
        let n = members.len();
        if n < 5 {
            return Err(MuseError::data(format!("class {c} has {n} slides; a 6:2:2 split needs at least 5")));
        }
        members.sort();
        let held = n / 5;
        let n_train = n - 2 * held;
        for (rank, (_, _, i)) in members.into_iter().enumerate() {
            out[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + held {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(per_class: usize, classes: usize) -> Vec<(String, usize)> {
        (0..classes).flat_map(|c| (0..per_class).map(move |i| (format!("c{c}-{i}"), c))).collect()
    }

    #[test]
    fn six_two_two_counts() {
        let it = items(60, 2);
        let splits = assign_splits(&it, 2, 1).unwrap();
        for c in 0..2 {
            let count = |s| it.iter().zip(&splits).filter(|((_, l), sp)| *l == c && **sp == s).count();
            assert_eq!(count(Split::Train), 36);
            assert_eq!(count(Split::Val), 12);
            assert_eq!(count(Split::Test), 12);
        }
    }

    #[test]
    fn split_depends_on_seed_but_is_stable() {
        let it = items(20, 2);
        let a = assign_splits(&it, 2, 3).unwrap();
        assert_eq!(a, assign_splits(&it, 2, 3).unwrap());
        assert_ne!(a, assign_splits(&it, 2, 4).unwrap());
    }

    #[test]
    fn too_small_class_rejected() {
        let it = items(4, 2);
        assert!(assign_splits(&it, 2, 0).is_err());
    }

    fn manifest() -> DatasetManifest {
        let mut entries = Vec::new();
        for c in 0..2 {
            for (i, split) in Split::ALL.iter().enumerate() {
                entries.push(ManifestEntry {
                    slide_id: format!("{c}-{i}"),
                    path: format!("{c}-{i}.bin"),
                    label: c,
                    split: *split,
                });
            }
        }
        DatasetManifest {
            class_names: vec!["a".into(), "b".into()],
            d: 4,
            entries,
            class_embeddings: None,
            knowledge_base: None,
        }
    }

    #[test]
    fn validation_catches_duplicates_and_missing_splits() {
        assert!(manifest().validate().is_ok());
        let mut dup = manifest();
        dup.entries[1].slide_id = dup.entries[0].slide_id.clone();
        assert!(dup.validate().is_err());
        let mut missing = manifest();
        missing.entries.retain(|e| !(e.label == 1 && e.split == Split::Test));
        assert!(missing.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let raw = r#"{"class_names":["a","b"],"d":2,"entries":[],"extra":1}"#;
        assert!(serde_json::from_str::<DatasetManifest>(raw).is_err());
    }
}
