//! Deterministic synthetic few-shot dataset with a matching knowledge base.
//!
//! Each class owns a unit prototype; prototypes are mutually orthonormal. A bag
//! of class `c` carries `ceil(signal_fraction * N)` signal patches
//! `signal_strength * p_c + noise` at random positions, the remaining patches
//! are pure noise. Knowledge-base entries are `p_c` plus a perturbation confined
//! to one of the aspect subspaces, which are orthogonal to every prototype
//! whenever `d` leaves room for them.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::bag::{write_feature_bag, PatchBag};
use super::binary::{self, Dtype, Sidecar};
use super::manifest::{assign_splits, Dataset, DatasetManifest, ManifestEntry};
use crate::error::{MuseError, Result};

/// Names used for the first four aspect subspaces.
pub const ASPECT_NAMES: [&str; 4] = [
    "cellular morphology",
    "tissue architecture",
    "color-staining characteristics",
    "spatial-texture patterns",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub d: usize,
    pub bags_per_class: usize,
    pub min_patches: usize,
    pub max_patches: usize,
    pub signal_fraction: f64,
    pub signal_strength: f64,
    pub noise_scale: f64,
    pub aspects: usize,
    pub texts_per_category: usize,
    /// Scale of the aspect perturbation added to knowledge-base entries.
    pub text_perturbation: f64,
    /// Scale of the noise added to prototypes to form class embeddings.
    pub embedding_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 2,
            d: 64,
            bags_per_class: 60,
            min_patches: 128,
            max_patches: 256,
            signal_fraction: 0.1,
            signal_strength: 3.0,
            noise_scale: 1.0,
            aspects: 4,
            texts_per_category: 300,
            text_perturbation: 0.5,
            embedding_noise: 0.1,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(MuseError::config("synthetic spec needs at least two classes"));
        }
        if self.d < self.classes {
            return Err(MuseError::config(format!(
                "d = {} is smaller than the class count {}; orthonormal prototypes do not exist",
                self.d, self.classes
            )));
        }
        if self.bags_per_class == 0
            || self.min_patches == 0
            || self.aspects == 0
            || self.texts_per_category == 0
        {
            return Err(MuseError::config("synthetic counts must be positive"));
        }
        if self.min_patches > self.max_patches {
            return Err(MuseError::config("min_patches exceeds max_patches"));
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return Err(MuseError::config("signal_fraction must lie in (0, 1]"));
        }
        for (name, v) in [
            ("signal_strength", self.signal_strength),
            ("noise_scale", self.noise_scale),
            ("text_perturbation", self.text_perturbation),
            ("embedding_noise", self.embedding_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(MuseError::config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn class_name(&self, c: usize) -> String {
        format!("class_{c}")
    }
}

/// Everything the generator produced, kept in memory alongside the files.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub manifest: DatasetManifest,
    pub bags: Vec<PatchBag>,
    /// `|C| x d`, orthonormal rows.
    pub prototypes: Array2<f64>,
    pub class_embeddings: Array2<f32>,
    /// Per-class knowledge-base banks.
    pub banks: Vec<Array2<f32>>,
    pub texts: Vec<Vec<String>>,
}

impl SyntheticData {
    /// The generated data as an in-memory dataset, class embeddings attached.
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::from_parts(self.manifest.clone(), PathBuf::new(), self.bags.clone())
            .with_class_embeddings(self.class_embeddings.mapv(f64::from))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const KB_DIR: &str = "kb";
const EMBEDDINGS_FILE: &str = "class_embeddings.bin";

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Gram-Schmidt against `basis`; `None` when the residual vanishes.
fn orthonormalize(mut v: Array1<f64>, basis: &[Array1<f64>]) -> Option<Array1<f64>> {
    for b in basis {
        let proj = v.dot(b);
        v.scaled_add(-proj, b);
    }
    let norm = v.dot(&v).sqrt();
    (norm > 1e-8).then(|| v / norm)
}

fn draw_orthonormal(rng: &mut ChaCha8Rng, d: usize, basis: &mut Vec<Array1<f64>>) -> Array1<f64> {
    loop {
        if let Some(v) = orthonormalize(gaussian_vec(rng, d), basis) {
            basis.push(v.clone());
            return v;
        }
    }
}

/// Generates the dataset in memory without touching the filesystem.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let d = spec.d;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut basis = Vec::new();
    let protos: Vec<Array1<f64>> =
        (0..spec.classes).map(|_| draw_orthonormal(&mut rng, d, &mut basis)).collect();

    // Aspect subspaces share whatever room the prototypes leave; when d is too
    // small they fall back to random unit directions.
    let free = d - spec.classes;
    let aspect_dim = (free / spec.aspects).clamp(1, 4);
    let aspects: Vec<Vec<Array1<f64>>> = (0..spec.aspects)
        .map(|_| {
            (0..aspect_dim)
                .map(|_| {
                    if basis.len() < d {
                        draw_orthonormal(&mut rng, d, &mut basis)
                    } else {
                        let v = gaussian_vec(&mut rng, d);
                        let n = v.dot(&v).sqrt();
                        v / n
                    }
                })
                .collect()
        })
        .collect();

    let mut prototypes = Array2::zeros((spec.classes, d));
    for (c, p) in protos.iter().enumerate() {
        prototypes.row_mut(c).assign(p);
    }

    let class_embeddings = Array2::from_shape_fn((spec.classes, d), |(c, j)| {
        let noise: f64 = rng.sample(StandardNormal);
        (protos[c][j] + spec.embedding_noise * noise / (d as f64).sqrt()) as f32
    });

    let mut bags = Vec::with_capacity(spec.classes * spec.bags_per_class);
    for (c, proto) in protos.iter().enumerate() {
        for b in 0..spec.bags_per_class {
            let n = rng.random_range(spec.min_patches..=spec.max_patches);
            let n_signal = ((spec.signal_fraction * n as f64).ceil() as usize).min(n);
            let mut is_signal: Vec<bool> = (0..n).map(|i| i < n_signal).collect();
            is_signal.shuffle(&mut rng);
            let mut features = Array2::<f32>::zeros((n, d));
            for (i, signal) in is_signal.iter().enumerate() {
                for j in 0..d {
                    let noise: f64 = rng.sample(StandardNormal);
                    let mut v = spec.noise_scale * noise;
                    if *signal {
                        v += spec.signal_strength * proto[j];
                    }
                    features[[i, j]] = v as f32;
                }
            }
            bags.push(PatchBag::new(format!("{}-{b:04}", spec.class_name(c)), features, c)?);
        }
    }

    let mut banks = Vec::with_capacity(spec.classes);
    let mut texts = Vec::with_capacity(spec.classes);
    for (c, proto) in protos.iter().enumerate() {
        let mut bank = Array2::<f32>::zeros((spec.texts_per_category, d));
        let mut lines = Vec::with_capacity(spec.texts_per_category);
        for i in 0..spec.texts_per_category {
            let a = rng.random_range(0..spec.aspects);
            let mut v = proto.clone();
            for dir in &aspects[a] {
                let coef: f64 = rng.sample(StandardNormal);
                v.scaled_add(spec.text_perturbation * coef, dir);
            }
            bank.row_mut(i).assign(&v.mapv(|x| x as f32));
            let aspect = ASPECT_NAMES.get(a).map(|s| s.to_string()).unwrap_or_else(|| format!("aspect {a}"));
            lines.push(format!("{}: synthetic description #{i} emphasising {aspect}", spec.class_name(c)));
        }
        banks.push(bank);
        texts.push(lines);
    }

    let ids: Vec<(String, usize)> = bags.iter().map(|b| (b.slide_id.clone(), b.label)).collect();
    let splits = assign_splits(&ids, spec.classes, spec.seed)?;
    let entries = bags
        .iter()
        .zip(splits)
        .map(|(bag, split)| ManifestEntry {
            slide_id: bag.slide_id.clone(),
            path: format!("bags/{}.bin", bag.slide_id),
            label: bag.label,
            split,
        })
        .collect();
    let manifest = DatasetManifest {
        class_names: (0..spec.classes).map(|c| spec.class_name(c)).collect(),
        d,
        entries,
        class_embeddings: Some(EMBEDDINGS_FILE.to_string()),
        knowledge_base: Some(KB_DIR.to_string()),
    };

    Ok(SyntheticData { manifest, bags, prototypes, class_embeddings, banks, texts })
}

/// Writes a knowledge-base category in the on-disk layout
/// `<class>.texts.json`, `<class>.bank.bin`, `<class>.bank.json`.
pub fn write_kb_category(
    dir: &Path,
    class_name: &str,
    label: usize,
    bank: &Array2<f32>,
    texts: &[String],
) -> Result<()> {
    binary::write_json(&dir.join(format!("{class_name}.texts.json")), &texts)?;
    let bin = dir.join(format!("{class_name}.bank.bin"));
    binary::write_f32(&bin, bank)?;
    let sidecar = Sidecar {
        slide_id: format!("{class_name}.bank"),
        n: bank.nrows(),
        d: bank.ncols(),
        label,
        dtype: Dtype::F32,
    };
    binary::write_json(&binary::sidecar_path(&bin), &sidecar)
}

/// Generates the dataset and writes it under `out_dir`:
/// `manifest.json`, `bags/*.bin|json`, `class_embeddings.bin|json`, `kb/`.
pub fn gen_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<SyntheticData> {
    let data = generate(spec)?;
    for (bag, entry) in data.bags.iter().zip(&data.manifest.entries) {
        write_feature_bag(bag, &out_dir.join(&entry.path))?;
    }
    let emb = out_dir.join(EMBEDDINGS_FILE);
    binary::write_f32(&emb, &data.class_embeddings)?;
    binary::write_json(
        &binary::sidecar_path(&emb),
        &Sidecar {
            slide_id: "class_embeddings".into(),
            n: spec.classes,
            d: spec.d,
            label: 0,
            dtype: Dtype::F32,
        },
    )?;
    let kb_dir = out_dir.join(KB_DIR);
    for (c, (bank, texts)) in data.banks.iter().zip(&data.texts).enumerate() {
        write_kb_category(&kb_dir, &data.manifest.class_names[c], c, bank, texts)?;
    }
    binary::write_json(&out_dir.join("synthetic_spec.json"), spec)?;
    data.manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::Split;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            classes: 2,
            d: 16,
            bags_per_class: 10,
            min_patches: 4,
            max_patches: 8,
            texts_per_category: 12,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn prototypes_are_orthonormal() {
        let data = generate(&SyntheticSpec { classes: 3, ..small() }).unwrap();
        let gram = data.prototypes.dot(&data.prototypes.t());
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn counts_and_splits() {
        let data = generate(&SyntheticSpec { bags_per_class: 60, d: 64, ..small() }).unwrap();
        assert_eq!(data.bags.len(), 120);
        let count = |s| data.manifest.entries_in(s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (72, 24, 24));
        data.manifest.validate().unwrap();
    }

    #[test]
    fn signal_patch_count_is_ceiling() {
        let spec = SyntheticSpec {
            min_patches: 10,
            max_patches: 10,
            signal_fraction: 0.25,
            signal_strength: 100.0,
            noise_scale: 0.0,
            ..small()
        };
        let data = generate(&spec).unwrap();
        for bag in &data.bags {
            let signal_rows = bag.features.rows().into_iter().filter(|r| r.iter().any(|v| *v != 0.0)).count();
            assert_eq!(signal_rows, 3);
        }
    }

    #[test]
    fn d_below_class_count_is_config_error() {
        let err = generate(&SyntheticSpec { classes: 4, d: 3, ..small() }).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn texts_per_category_sets_bank_size() {
        let data = generate(&SyntheticSpec { texts_per_category: 300, ..small() }).unwrap();
        assert!(data.banks.iter().all(|b| b.nrows() == 300));
        assert!(data.texts.iter().all(|t| t.len() == 300));
        assert!(data.texts[1][0].starts_with("class_1"));
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_synthetic(&small(), a.path()).unwrap();
        gen_synthetic(&small(), b.path()).unwrap();
        let mut files: Vec<_> = walk(a.path());
        files.sort();
        assert!(files.len() > 20);
        for rel in files {
            let x = std::fs::read(a.path().join(&rel)).unwrap();
            let y = std::fs::read(b.path().join(&rel)).unwrap();
            assert_eq!(x, y, "{}", rel.display());
        }
    }

    fn walk(root: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(dir).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
        out
    }
}
