use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Split};
use crate::error::{MuseError, Result};

/// `k` training slides per class, drawn deterministically from the train split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSubset {
    pub k: usize,
    pub seed: u64,
    /// Selected slide ids, indexed by class.
    pub per_class: Vec<Vec<String>>,
    /// Classes that had fewer than `k` train slides.
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FewShotSubset {
    pub fn len(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ids interleaved class by class (c0[0], c1[0], c0[1], ...), the order
    /// training visits them in.
    pub fn interleaved(&self) -> Vec<&str> {
        let longest = self.per_class.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = Vec::with_capacity(self.len());
        for i in 0..longest {
            for ids in &self.per_class {
                if let Some(id) = ids.get(i) {
                    out.push(id.as_str());
                }
            }
        }
        out
    }
}

pub fn sample_few_shot(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FewShotSubset> {
    if k == 0 {
        return Err(MuseError::config("k must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class = Vec::with_capacity(manifest.num_classes());
    let mut warnings = Vec::new();
    for (c, name) in manifest.class_names.iter().enumerate() {
        let pool: Vec<&str> =
            manifest.entries_in(Split::Train).filter(|e| e.label == c).map(|e| e.slide_id.as_str()).collect();
        if pool.is_empty() {
            return Err(MuseError::data(format!("class {name} has no train slides")));
        }
        let take = k.min(pool.len());
        if take < k {
            let msg = format!("class {name}: requested {k} shots, only {} available", pool.len());
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let chosen =
            index::sample(&mut rng, pool.len(), take).into_iter().map(|i| pool[i].to_string()).collect();
        per_class.push(chosen);
    }
    Ok(FewShotSubset { k, seed, per_class, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::ManifestEntry;

    fn manifest(train: [usize; 2]) -> DatasetManifest {
        let mut entries = Vec::new();
        for (c, &n) in train.iter().enumerate() {
            for i in 0..n {
                entries.push(ManifestEntry {
                    slide_id: format!("c{c}-{i}"),
                    path: String::new(),
                    label: c,
                    split: Split::Train,
                });
            }
            for split in [Split::Val, Split::Test] {
                entries.push(ManifestEntry {
                    slide_id: format!("c{c}-{split:?}"),
                    path: String::new(),
                    label: c,
                    split,
                });
            }
        }
        DatasetManifest {
            class_names: vec!["a".into(), "b".into()],
            d: 2,
            entries,
            class_embeddings: None,
            knowledge_base: None,
        }
    }

    #[test]
    fn four_shots_per_class() {
        let s = sample_few_shot(&manifest([50, 50]), 4, 0).unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.per_class.iter().all(|ids| ids.len() == 4));
        assert!(s.warnings.is_empty());
        for (c, ids) in s.per_class.iter().enumerate() {
            assert!(ids
                .iter()
                .all(|id| id.starts_with(&format!("c{c}-")) && !id.contains("Val") && !id.contains("Test")));
        }
    }

    #[test]
    fn clamps_with_warning() {
        let s = sample_few_shot(&manifest([10, 50]), 16, 0).unwrap();
        assert_eq!(s.per_class[0].len(), 10);
        assert_eq!(s.per_class[1].len(), 16);
        assert_eq!(s.len(), 26);
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn deterministic_per_seed() {
        let m = manifest([50, 50]);
        assert_eq!(sample_few_shot(&m, 4, 7).unwrap(), sample_few_shot(&m, 4, 7).unwrap());
        assert_ne!(sample_few_shot(&m, 4, 7).unwrap(), sample_few_shot(&m, 4, 8).unwrap());
    }

    #[test]
    fn zero_k_and_empty_class_rejected() {
        assert!(sample_few_shot(&manifest([5, 5]), 0, 0).is_err());
        assert!(matches!(sample_few_shot(&manifest([0, 5]), 2, 0), Err(MuseError::Data(_))));
    }

    #[test]
    fn interleaving_alternates_classes() {
        let s = FewShotSubset {
            k: 2,
            seed: 0,
            per_class: vec![vec!["a0".into(), "a1".into()], vec!["b0".into()]],
            warnings: vec![],
        };
        assert_eq!(s.interleaved(), ["a0", "b0", "a1"]);
    }
}
