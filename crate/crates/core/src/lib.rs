//! Few-shot whole-slide-image classification over patch-feature bags:
//! expert-routed category semantics, filtered cross-attention fusion,
//! knowledge-base retrieval with multi-view training, baselines and an
//! experiment harness.

pub mod autograd;
pub mod data;
pub mod dsr;
pub mod error;
pub mod harness;
pub mod kb;
pub mod metrics;
pub mod model;
pub mod params;
pub mod svti;
pub mod train;

pub use data::{
    gen_synthetic, sample_few_shot, Dataset, DatasetManifest, FewShotSubset, PatchBag, Split, SyntheticData,
    SyntheticSpec,
};
pub use dsr::{CategorySemantics, ExpertPool};
pub use error::{MuseError, Result};
pub use harness::{AblationGrid, ExperimentConfig, Report};
pub use kb::{Adapter, KnowledgeBase, RetrievalQueue, RetrievalStrategy};
pub use metrics::{compute_metrics, Metrics};
pub use model::{infer, Architecture, ModelKind, Network, Prediction};
pub use svti::{AttentionParams, Interaction, SemanticPrior};
pub use train::{load_checkpoint, save_checkpoint, train, ModelState, Optimization, TrainConfig};
