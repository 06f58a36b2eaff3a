//! Dataset manifests, feature-bag files, few-shot sampling and the synthetic
//! generator.

pub mod bag;
pub mod binary;
pub mod fewshot;
pub mod manifest;
pub mod synthetic;

pub use bag::{load_feature_bag, read_feature_bag, write_feature_bag, PatchBag};
pub use binary::{Dtype, Sidecar};
pub use fewshot::{sample_few_shot, FewShotSubset};
pub use manifest::{assign_splits, Dataset, DatasetManifest, ManifestEntry, Split};
pub use synthetic::{gen_synthetic, generate, SyntheticData, SyntheticSpec};
