//! Category-conditioned text knowledge base: ingestion, the alignment adapter,
//! top-m retrieval and the shuffled retrieval queue.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Mat, Tape, Var};
use crate::data::binary::{self, Sidecar};
use crate::data::synthetic::write_kb_category;
use crate::data::SyntheticData;
use crate::error::{MuseError, Result};
use crate::params::Parameters;

/// Prompt templates for producing a description corpus with an external
/// language model. Nothing in this crate calls a language model; the
/// templates document the expected corpus structure. Placeholders are in
/// braces.
pub mod templates {
    /// Step 1: ask for the diagnostic aspects of a dataset.
    pub const ASPECTS: &str = "Acting as a pathologist reviewing {dataset}, list four \
        visual aspects that separate its diagnostic categories.";
    /// Step 2: ask for concrete examples of one aspect for one category.
    pub const EXEMPLARS: &str = "Give 10 short, concrete examples of how {aspect} appears \
        in whole-slide images of {class_name}.";
    /// Step 3: combine one example per aspect into a single description.
    pub const SYNTHESIS: &str = "Write one paragraph describing {class_name} at high \
        magnification that covers these observations: {examples}.";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Ingested,
    Synthetic,
}

/// Encodes raw description text into the feature space of the banks.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<f32>;
}

/// Deterministic signed feature hashing of lower-cased word tokens, L2
/// normalised. Stands in for a pretrained text encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEncoder {
    pub d: usize,
}

impl TextEncoder for HashingEncoder {
    fn dim(&self) -> usize {
        self.d
    }

    fn encode(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f64; self.d];
        for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let digest = Sha256::digest(token.to_lowercase().as_bytes());
            let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            let slot = (h % self.d as u64) as usize;
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[slot] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Empty text still needs a nonzero row.
            v[0] = 1.0;
            return v.into_iter().map(|x| x as f32).collect();
        }
        v.into_iter().map(|x| (x / norm) as f32).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    pub class_names: Vec<String>,
    /// One `T_c x d` bank per category.
    pub banks: Vec<Array2<f32>>,
    /// Raw text per bank row.
    pub texts: Vec<Vec<String>>,
    pub provenance: Provenance,
}

impl KnowledgeBase {
    pub fn new(
        class_names: Vec<String>,
        banks: Vec<Array2<f32>>,
        texts: Vec<Vec<String>>,
        provenance: Provenance,
    ) -> Result<Self> {
        let kb = Self { class_names, banks, texts, provenance };
        kb.validate()?;
        Ok(kb)
    }

    pub fn from_synthetic(data: &SyntheticData) -> Result<Self> {
        Self::new(
            data.manifest.class_names.clone(),
            data.banks.clone(),
            data.texts.clone(),
            Provenance::Synthetic,
        )
    }

    pub fn d(&self) -> usize {
        self.banks.first().map_or(0, Array2::ncols)
    }

    pub fn bank(&self, label: usize) -> Result<&Array2<f32>> {
        self.banks
            .get(label)
            .ok_or_else(|| MuseError::data(format!("no knowledge-base bank for label {label}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() != self.banks.len() || self.banks.len() != self.texts.len() {
            return Err(MuseError::data("knowledge base needs one bank and text list per class"));
        }
        let d = self.d();
        for ((name, bank), texts) in self.class_names.iter().zip(&self.banks).zip(&self.texts) {
            if bank.nrows() == 0 {
                return Err(MuseError::data(format!("category {name} has an empty bank")));
            }
            if bank.ncols() != d {
                return Err(MuseError::data(format!("category {name} bank has width {}", bank.ncols())));
            }
            if bank.nrows() != texts.len() {
                return Err(MuseError::data(format!(
                    "category {name}: {} bank rows but {} texts",
                    bank.nrows(),
                    texts.len()
                )));
            }
            for (i, row) in bank.rows().into_iter().enumerate() {
                if row.iter().any(|v| !v.is_finite()) || row.iter().all(|v| *v == 0.0) {
                    return Err(MuseError::data(format!("category {name}: row {i} is zero or non-finite")));
                }
            }
        }
        Ok(())
    }

    /// Writes the on-disk layout read by [`ingest_kb`].
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (c, name) in self.class_names.iter().enumerate() {
            write_kb_category(dir, name, c, &self.banks[c], &self.texts[c])?;
        }
        Ok(())
    }
}

fn category_of(file_name: &str) -> Option<&str> {
    file_name
        .strip_suffix(".texts.json")
        .or_else(|| file_name.strip_suffix(".bank.bin"))
        .or_else(|| file_name.strip_suffix(".bank.json"))
}

/// Loads per-category banks from `dir`.
///
/// Each category needs `<class>.bank.bin` (+ sidecar) or `<class>.texts.json`,
/// or both. Text-only categories are encoded with `encoder`; without one this
/// is a config error.
pub fn ingest_kb(
    dir: &Path,
    class_names: &[String],
    d: usize,
    encoder: Option<&dyn TextEncoder>,
) -> Result<KnowledgeBase> {
    let listing = std::fs::read_dir(dir).map_err(|e| MuseError::io(dir, e))?;
    let mut found = BTreeSet::new();
    for entry in listing {
        let entry = entry.map_err(|e| MuseError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(cat) = category_of(&name) {
            found.insert(cat.to_string());
        }
    }
    let expected: BTreeSet<String> = class_names.iter().cloned().collect();
    if found != expected {
        let extra: Vec<_> = found.difference(&expected).collect();
        let missing: Vec<_> = expected.difference(&found).collect();
        return Err(MuseError::data(format!(
            "knowledge-base categories disagree with class names (missing {missing:?}, unexpected {extra:?})"
        )));
    }

    let mut banks = Vec::with_capacity(class_names.len());
    let mut texts = Vec::with_capacity(class_names.len());
    for name in class_names {
        let text_path = dir.join(format!("{name}.texts.json"));
        let bank_path = dir.join(format!("{name}.bank.bin"));
        let raw: Option<Vec<String>> =
            if text_path.exists() { Some(binary::read_json(&text_path)?) } else { None };
        if raw.as_ref().is_some_and(Vec::is_empty) {
            return Err(MuseError::data(format!("category {name} has no descriptions")));
        }
        let bank = if bank_path.exists() {
            let sidecar: Sidecar = binary::read_sidecar(&binary::sidecar_path(&bank_path))?;
            if sidecar.n == 0 {
                return Err(MuseError::data(format!("category {name} has an empty bank")));
            }
            binary::read_f32(&bank_path, &sidecar)?
        } else {
            let Some(lines) = &raw else {
                return Err(MuseError::data(format!("category {name} has neither bank nor texts")));
            };
            let Some(enc) = encoder else {
                return Err(MuseError::config(format!(
                    "category {name} has raw text only and no text encoder is configured; \
                     pass the hashing encoder (--encoder hashing) or provide {name}.bank.bin"
                )));
            };
            if enc.dim() != d {
                return Err(MuseError::config(format!("encoder width {} but d = {d}", enc.dim())));
            }
            let mut bank = Array2::zeros((lines.len(), d));
            for (i, line) in lines.iter().enumerate() {
                bank.row_mut(i).assign(&Array1::from(enc.encode(line)));
            }
            bank
        };
        if bank.ncols() != d {
            return Err(MuseError::data(format!(
                "category {name} bank width {} but dataset d = {d}",
                bank.ncols()
            )));
        }
        let lines = match raw {
            Some(lines) => lines,
            None => (0..bank.nrows()).map(|i| format!("{name}#{i}")).collect(),
        };
        banks.push(bank);
        texts.push(lines);
    }
    KnowledgeBase::new(class_names.to_vec(), banks, texts, Provenance::Ingested)
}

/// Affine map `x W + b` aligning priors with the text feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<T = Mat> {
    /// `d x d`
    pub weight: T,
    /// `1 x d`
    pub bias: T,
}

impl<T> Adapter<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Adapter<U> {
        Adapter { weight: f(&self.weight), bias: f(&self.bias) }
    }
}

impl Adapter {
    pub fn identity(d: usize) -> Self {
        Self { weight: Mat::eye(d), bias: Mat::zeros((1, d)) }
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.weight) + self.bias.row(0)
    }
}

impl Adapter<Var> {
    pub(crate) fn apply_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let y = tape.matmul(x, self.weight);
        tape.add_row(y, self.bias)
    }
}

impl Parameters for Adapter {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        vec![("adapter.weight".into(), &self.weight), ("adapter.bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalStrategy {
    #[default]
    Cosine,
    L2,
    Random,
}

impl std::str::FromStr for RetrievalStrategy {
    type Err = MuseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "l2" => Ok(Self::L2),
            "random" => Ok(Self::Random),
            other => Err(MuseError::config(format!("unknown retrieval strategy {other}"))),
        }
    }
}

/// Retrieved text features in seeded-shuffled order, consumed front to back.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalQueue {
    entries: Vec<(Array1<f64>, usize)>,
    cursor: usize,
    pub seed: u64,
    /// The strategy actually applied (cosine falls back to l2 for a zero query).
    pub strategy: RetrievalStrategy,
}

impl RetrievalQueue {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - self.cursor
    }

    /// Bank indices in queue order.
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|(_, i)| *i).collect()
    }

    /// Next feature, or `None` once every entry has been consumed.
    pub fn dequeue(&mut self) -> Option<(Array1<f64>, usize)> {
        let item = self.entries.get(self.cursor).cloned()?;
        self.cursor += 1;
        Some(item)
    }

    /// Mean of all retrieved features.
    pub fn mean_feature(&self) -> Option<Array1<f64>> {
        let first = self.entries.first()?;
        let mut acc = Array1::zeros(first.0.len());
        for (t, _) in &self.entries {
            acc += t;
        }
        Some(acc / self.entries.len() as f64)
    }
}

/// In-place Fisher-Yates shuffle driven by `rng`.
pub fn fisher_yates<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f32>) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let y = f64::from(*y);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub fn l2_distance(a: ArrayView1<f64>, b: ArrayView1<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let diff = x - f64::from(*y);
            diff * diff
        })
        .sum::<f64>()
        .sqrt()
}

/// Bank indices ranked by the strategy's similarity, best first; ties keep the
/// lower index first.
fn rank(query: ArrayView1<f64>, bank: &Array2<f32>, strategy: RetrievalStrategy) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = bank
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| match strategy {
            RetrievalStrategy::Cosine => (cosine_similarity(query, row), i),
            // Negate so larger is better for both metrics.
            RetrievalStrategy::L2 => (-l2_distance(query, row), i),
            RetrievalStrategy::Random => unreachable!("random retrieval is not ranked"),
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Retrieves the top-`m` entries of the `label` bank for the adapted prior
/// `A(f)` and returns them as a seeded-shuffled queue.
pub fn retrieve(
    prior: ArrayView1<f64>,
    kb: &KnowledgeBase,
    label: usize,
    m: usize,
    strategy: RetrievalStrategy,
    adapter: &Adapter,
    seed: u64,
) -> Result<RetrievalQueue> {
    if m == 0 {
        return Err(MuseError::config("m must be at least 1"));
    }
    let bank = kb.bank(label)?;
    if prior.len() != bank.ncols() {
        return Err(MuseError::data(format!(
            "prior width {} but knowledge base d = {}",
            prior.len(),
            bank.ncols()
        )));
    }
    let take = if m > bank.nrows() {
        log::warn!(
            "requested {m} texts but category {} holds {}; clamping",
            kb.class_names[label],
            bank.nrows()
        );
        bank.nrows()
    } else {
        m
    };
    let query = adapter.apply(prior);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = strategy;
    let mut chosen = match strategy {
        RetrievalStrategy::Random => index::sample(&mut rng, bank.nrows(), take).into_vec(),
        RetrievalStrategy::Cosine if query.iter().all(|v| *v == 0.0) => {
            log::warn!("adapted prior has zero norm; falling back to l2 retrieval");
            used = RetrievalStrategy::L2;
            rank(query.view(), bank, RetrievalStrategy::L2)
        }
        s => rank(query.view(), bank, s),
    };
    chosen.truncate(take);
    fisher_yates(&mut chosen, &mut rng);
    let entries = chosen.into_iter().map(|i| (bank.row(i).mapv(f64::from), i)).collect();
    Ok(RetrievalQueue { entries, cursor: 0, seed, strategy: used })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn kb(bank: Array2<f32>) -> KnowledgeBase {
        let n = bank.nrows();
        let other = Array2::from_elem((1, bank.ncols()), 1.0);
        KnowledgeBase::new(
            vec!["a".into(), "b".into()],
            vec![bank, other],
            vec![(0..n).map(|i| i.to_string()).collect(), vec!["x".into()]],
            Provenance::Synthetic,
        )
        .unwrap()
    }

    #[test]
    fn orthonormal_bank_cosine_picks_matching_axis() {
        let kb = kb(array![[1.0, 0.0], [0.0, 1.0]]);
        let q =
            retrieve(array![1.0, 0.0].view(), &kb, 0, 1, RetrievalStrategy::Cosine, &Adapter::identity(2), 0)
                .unwrap();
        assert_eq!(q.indices(), vec![0]);
    }

    #[test]
    fn clamps_m_to_bank_size() {
        let kb = kb(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let q =
            retrieve(array![1.0, 0.0].view(), &kb, 0, 20, RetrievalStrategy::L2, &Adapter::identity(2), 0)
                .unwrap();
        assert_eq!(q.len(), 3);
    }

    #[test]
    fn zero_query_falls_back_to_l2() {
        let kb = kb(array![[3.0, 0.0], [0.5, 0.0]]);
        let q =
            retrieve(array![0.0, 0.0].view(), &kb, 0, 1, RetrievalStrategy::Cosine, &Adapter::identity(2), 0)
                .unwrap();
        assert_eq!(q.strategy, RetrievalStrategy::L2);
        assert_eq!(q.indices(), vec![1]);
    }

    #[test]
    fn unknown_label_and_zero_m() {
        let kb = kb(array![[1.0, 0.0]]);
        let a = Adapter::identity(2);
        assert!(matches!(
            retrieve(array![1.0, 0.0].view(), &kb, 5, 1, RetrievalStrategy::Cosine, &a, 0),
            Err(MuseError::Data(_))
        ));
        assert!(retrieve(array![1.0, 0.0].view(), &kb, 0, 0, RetrievalStrategy::Cosine, &a, 0)
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn random_strategy_is_seeded() {
        let bank = Array2::from_shape_fn((50, 4), |(i, j)| (i * 4 + j + 1) as f32);
        let kb = kb(bank);
        let a = Adapter::identity(4);
        let q1 = retrieve(array![1.0, 0.0, 0.0, 0.0].view(), &kb, 0, 10, RetrievalStrategy::Random, &a, 9)
            .unwrap();
        let q2 = retrieve(array![1.0, 0.0, 0.0, 0.0].view(), &kb, 0, 10, RetrievalStrategy::Random, &a, 9)
            .unwrap();
        assert_eq!(q1, q2);
        let q3 = retrieve(array![1.0, 0.0, 0.0, 0.0].view(), &kb, 0, 10, RetrievalStrategy::Random, &a, 10)
            .unwrap();
        assert_ne!(q1.indices(), q3.indices());
    }

    #[test]
    fn queue_of_three_dequeues_three_times() {
        let kb = kb(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let mut q =
            retrieve(array![1.0, 0.2].view(), &kb, 0, 3, RetrievalStrategy::Cosine, &Adapter::identity(2), 4)
                .unwrap();
        assert!(q.dequeue().is_some());
        assert!(q.dequeue().is_some());
        assert!(q.dequeue().is_some());
        assert_eq!(q.remaining(), 0);
        assert!(q.dequeue().is_none());
    }

    #[test]
    fn different_shuffle_seeds_same_multiset() {
        let bank = Array2::from_shape_fn((30, 3), |(i, j)| ((i + 1) * (j + 2)) as f32 % 7.0 + 0.5);
        let kb = kb(bank);
        let a = Adapter::identity(3);
        let q1 =
            retrieve(array![0.3, 1.0, -0.2].view(), &kb, 0, 12, RetrievalStrategy::Cosine, &a, 1).unwrap();
        let q2 =
            retrieve(array![0.3, 1.0, -0.2].view(), &kb, 0, 12, RetrievalStrategy::Cosine, &a, 2).unwrap();
        let mut i1 = q1.indices();
        let mut i2 = q2.indices();
        assert_ne!(i1, i2);
        i1.sort();
        i2.sort();
        assert_eq!(i1, i2);
    }

    #[test]
    fn adapter_identity_and_affine() {
        let a = Adapter::identity(3);
        assert_eq!(a.apply(array![1.0, 2.0, 3.0].view()), array![1.0, 2.0, 3.0]);
        let shifted = Adapter { weight: Mat::eye(2) * 2.0, bias: array![[1.0, -1.0]] };
        assert_eq!(shifted.apply(array![1.0, 1.0].view()), array![3.0, 1.0]);
    }

    #[test]
    fn hashing_encoder_is_unit_norm_and_deterministic() {
        let enc = HashingEncoder { d: 16 };
        let a = enc.encode("Dense nuclear crowding, irregular vessels");
        assert_eq!(a, enc.encode("dense NUCLEAR crowding irregular vessels"));
        let n: f32 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
        assert!(enc.encode("").iter().any(|v| *v != 0.0));
    }

    #[test]
    fn invalid_banks_rejected() {
        let zero_row = KnowledgeBase::new(
            vec!["a".into(), "b".into()],
            vec![Array2::zeros((1, 2)), Array2::ones((1, 2))],
            vec![vec!["x".into()], vec!["y".into()]],
            Provenance::Ingested,
        );
        assert!(zero_row.is_err());
        let ragged = KnowledgeBase::new(
            vec!["a".into(), "b".into()],
            vec![Array2::ones((2, 2)), Array2::ones((1, 2))],
            vec![vec!["x".into()], vec!["y".into()]],
            Provenance::Ingested,
        );
        assert!(ragged.is_err());
    }
}
