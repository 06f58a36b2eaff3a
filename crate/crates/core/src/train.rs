//! Training loops (plain, stochastic multi-view and multi-mean), early
//! stopping, evaluation and checkpoints.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::data::binary::{self, Dtype, Sidecar};
use crate::data::{Dataset, FewShotSubset, PatchBag, Split};
use crate::error::{MuseError, Result};
use crate::kb::{fisher_yates, retrieve, KnowledgeBase, RetrievalStrategy};
use crate::metrics::{compute_metrics, Metrics};
use crate::model::{infer, Architecture, ModelKind, Network};
use crate::params::{AdamW, AdamWConfig, Parameters};
use crate::svti::Interaction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimization {
    /// One update per retrieved text feature.
    #[default]
    Stochastic,
    /// One update per bag on the mean retrieved feature.
    MultiMean,
}

impl std::str::FromStr for Optimization {
    type Err = MuseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(Self::Stochastic),
            "multi-mean" => Ok(Self::MultiMean),
            other => Err(MuseError::config(format!("unknown optimization strategy {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EarlyStopMetric {
    /// Validation AUC (accuracy when AUC is undefined), higher is better.
    #[default]
    Auc,
    Acc,
    /// Validation cross-entropy, lower is better.
    Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub early_stop: EarlyStopMetric,
    pub batch_size: usize,
    /// Texts retrieved per bag.
    pub m: usize,
    pub optimization: Optimization,
    pub retrieval: RetrievalStrategy,
    /// Expert pool size `R`.
    pub experts: usize,
    pub top_k: usize,
    /// Percentage of patches kept per head.
    pub top_percent: f64,
    pub heads: usize,
    pub seed: u64,
    /// Weight of `1 - cos(A(f), mean retrieved feature)`; 0 disables it.
    pub align_weight: f64,
    /// Expert-routed cues with patch filtering; off means one plain query per class.
    pub sfse: bool,
    /// Knowledge-base auxiliary views during training.
    pub smmo: bool,
    pub router_noise: bool,
    /// Reuse the bag-start logits across the inner updates instead of
    /// recomputing them at every step.
    pub literal_algorithm1: bool,
    pub softmax_over_all: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            epochs: 200,
            patience: 20,
            early_stop: EarlyStopMetric::Auc,
            batch_size: 1,
            m: 20,
            optimization: Optimization::Stochastic,
            retrieval: RetrievalStrategy::Cosine,
            experts: 8,
            top_k: 2,
            top_percent: 20.0,
            heads: 4,
            seed: 0,
            align_weight: 0.1,
            sfse: true,
            smmo: true,
            router_noise: true,
            literal_algorithm1: false,
            softmax_over_all: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MuseError::config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.patience == 0 {
            return bad("epochs and patience must be at least 1".into());
        }
        if self.batch_size != 1 {
            return bad(format!("only batch_size = 1 is supported, got {}", self.batch_size));
        }
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return bad(format!("need 1 <= k <= R, got k = {}, R = {}", self.top_k, self.experts));
        }
        if !(self.top_percent > 0.0 && self.top_percent <= 100.0) {
            return bad(format!("top_percent must lie in (0, 100], got {}", self.top_percent));
        }
        if self.heads == 0 {
            return bad("heads must be at least 1".into());
        }
        if !(self.align_weight >= 0.0 && self.align_weight.is_finite()) {
            return bad(format!("align_weight must be non-negative, got {}", self.align_weight));
        }
        Ok(())
    }

    pub fn architecture(&self, kind: ModelKind, d: usize, num_classes: usize) -> Architecture {
        Architecture {
            kind,
            d,
            num_classes,
            heads: self.heads,
            experts: self.experts,
            top_k: self.top_k,
            top_percent: self.top_percent,
            interaction: if self.sfse { Interaction::Fine } else { Interaction::Plain },
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub steps: usize,
    /// Steps that used a retrieved text view.
    pub aux_steps: usize,
    pub val: Option<Metrics>,
    pub val_loss: Option<f64>,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub total_steps: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| MuseError::io(parent, e))?;
        }
        let mut out = Vec::new();
        for e in &self.epochs {
            serde_json::to_writer(&mut out, e).map_err(|e| MuseError::json(path, e))?;
            out.push(b'\n');
        }
        let mut file = std::fs::File::create(path).map_err(|e| MuseError::io(path, e))?;
        file.write_all(&out).map_err(|e| MuseError::io(path, e))
    }
}

/// Trained parameters plus optimizer state and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub network: Network,
    pub optimizer: AdamW,
    pub class_names: Vec<String>,
    pub epoch: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub log: TrainLog,
}

/// What the loss of one update is built from.
enum View<'a> {
    /// Cross-entropy on `z` alone.
    Plain,
    /// Fused logits with the auxiliary prior from `text`.
    Text { text: &'a Array1<f64>, align: Option<&'a Array1<f64>> },
    /// As `Text` but with `z` frozen at its bag-start value.
    Literal { z: &'a Array1<f64>, f: &'a Array1<f64>, text: &'a Array1<f64>, align: Option<&'a Array1<f64>> },
}

struct Learner<'a> {
    net: &'a mut Network,
    opt: &'a mut AdamW,
    noise: ChaCha8Rng,
    config: &'a TrainConfig,
}

fn row_const(tape: &mut Tape, v: &Array1<f64>) -> Var {
    tape.constant(v.clone().insert_axis(Axis(0)))
}

/// Records the loss of one update on `tape`.
fn loss_on_tape(
    tape: &mut Tape,
    bound: &Network<Var>,
    features: &Mat,
    label: usize,
    view: View<'_>,
    mut noise: Option<&mut ChaCha8Rng>,
    align_weight: f64,
) -> Var {
    let x = tape.constant(features.clone());
    let ctx = bound.context(tape, x);
    let mut align_src: Option<(Array1<f64>, &Array1<f64>)> = None;

    let logits = match view {
        View::Plain => {
            let f = bound.represent_on_tape(tape, &ctx, None, noise.as_deref_mut());
            bound.head.on_tape(tape, f)
        }
        View::Text { text, align } => {
            let f = bound.represent_on_tape(tape, &ctx, None, noise.as_deref_mut());
            let z = bound.head.on_tape(tape, f);
            let t = row_const(tape, text);
            let f_aux = bound.represent_on_tape(tape, &ctx, Some(t), noise.as_deref_mut());
            let z_aux = bound.head.on_tape(tape, f_aux);
            if let Some(target) = align {
                align_src = Some((tape.value(f).row(0).to_owned(), target));
            }
            let sum = tape.add(z, z_aux);
            tape.scale(sum, 0.5)
        }
        View::Literal { z, f, text, align } => {
            let z = row_const(tape, z);
            let t = row_const(tape, text);
            let f_aux = bound.represent_on_tape(tape, &ctx, Some(t), noise);
            let z_aux = bound.head.on_tape(tape, f_aux);
            if let Some(target) = align {
                align_src = Some((f.clone(), target));
            }
            let sum = tape.add(z, z_aux);
            tape.scale(sum, 0.5)
        }
    };
    let mut loss = tape.cross_entropy(logits, label);
    if let (Some((f, target)), Some(adapter), true) = (align_src, &bound.adapter, align_weight > 0.0) {
        // The prior is a constant here: this term trains only the adapter.
        let f = row_const(tape, &f);
        let a = adapter.apply_on_tape(tape, f);
        let t = row_const(tape, target);
        let cos = tape.cosine(a, t);
        let neg = tape.scale(cos, -align_weight);
        let offset = tape.constant(Mat::from_elem((1, 1), align_weight));
        let align_loss = tape.add(neg, offset);
        loss = tape.add(loss, align_loss);
    }
    loss
}

impl Learner<'_> {
    /// Builds the loss for one bag and view, back-propagates and updates.
    fn step(&mut self, features: &Mat, label: usize, view: View<'_>) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.net.map(&mut |m| tape.leaf(m.clone()));
        let noise = self.config.router_noise.then_some(&mut self.noise);
        let loss = loss_on_tape(&mut tape, &bound, features, label, view, noise, self.config.align_weight);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(MuseError::NonFinite(format!("training loss is {value}")));
        }
        let grads = tape.backward(loss);
        let g = bound.map(&mut |v| grads.of(&tape, *v));
        self.opt.update(self.net, &g);
        if let Some(name) = self.net.first_non_finite() {
            return Err(MuseError::NonFinite(format!(
                "parameter {name} after optimizer step {}",
                self.opt.step
            )));
        }
        Ok(value)
    }
}

/// Training loss for one bag (router noise off) and its gradient with
/// respect to every parameter. With `text`, the loss fuses the auxiliary
/// view of that feature and aligns the adapter to it.
pub fn loss_and_gradients(
    net: &Network,
    bag: &PatchBag,
    text: Option<&Array1<f64>>,
    align_weight: f64,
) -> Result<(f64, Network)> {
    if bag.d() != net.arch.d || text.is_some_and(|t| t.len() != net.arch.d) {
        return Err(MuseError::data("input width disagrees with the model"));
    }
    if bag.label >= net.arch.num_classes {
        return Err(MuseError::data(format!("label {} outside the class range", bag.label)));
    }
    let mut tape = Tape::new();
    let bound = net.map(&mut |m| tape.leaf(m.clone()));
    let view = match text {
        Some(t) => View::Text { text: t, align: Some(t) },
        None => View::Plain,
    };
    let loss = loss_on_tape(&mut tape, &bound, &bag.features_f64(), bag.label, view, None, align_weight);
    let grads = tape.backward(loss);
    Ok((tape.scalar(loss), bound.map(&mut |v| grads.of(&tape, *v))))
}

/// Predictions, metrics and mean cross-entropy on a set of bags.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub slide_ids: Vec<String>,
}

pub fn evaluate(net: &Network, bags: &[&PatchBag]) -> Result<Evaluation> {
    if bags.is_empty() {
        return Err(MuseError::data("nothing to evaluate"));
    }
    let mut predictions = Vec::with_capacity(bags.len());
    let mut scores = Vec::with_capacity(bags.len());
    let mut labels = Vec::with_capacity(bags.len());
    let mut slide_ids = Vec::with_capacity(bags.len());
    let mut loss = 0.0;
    for bag in bags {
        let p = infer(bag, net)?;
        loss -= p.scores[bag.label].max(f64::MIN_POSITIVE).ln();
        predictions.push(p.label);
        scores.push(p.scores);
        labels.push(bag.label);
        slide_ids.push(bag.slide_id.clone());
    }
    let metrics = compute_metrics(&predictions, &scores, &labels, net.arch.num_classes)?;
    Ok(Evaluation { metrics, loss: loss / bags.len() as f64, predictions, scores, labels, slide_ids })
}

/// Higher is better; the validation loss breaks ties so a saturated metric
/// still tracks progress.
fn monitored(e: &Evaluation, metric: EarlyStopMetric) -> (f64, f64) {
    let primary = match metric {
        EarlyStopMetric::Auc => e.metrics.auc.unwrap_or(e.metrics.acc),
        EarlyStopMetric::Acc => e.metrics.acc,
        EarlyStopMetric::Loss => -e.loss,
    };
    (primary, -e.loss)
}

/// Trains `kind` on the few-shot subset, early-stopping on the validation
/// split, and returns the best-validation snapshot.
///
/// `kb` is needed only for MUSE with the knowledge-base views enabled.
pub fn train(
    dataset: &Dataset,
    subset: &FewShotSubset,
    kb: Option<&KnowledgeBase>,
    kind: ModelKind,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest = &dataset.manifest;
    let d = manifest.d;
    let num_classes = manifest.num_classes();
    let use_kb = kind == ModelKind::Muse && config.smmo;
    let kb = match (use_kb, kb) {
        (true, None) => {
            return Err(MuseError::config("knowledge-base views are enabled but no knowledge base was given"))
        }
        (true, Some(kb)) => {
            if kb.d() != d || kb.banks.len() != num_classes {
                return Err(MuseError::data(format!(
                    "knowledge base has {} banks of width {}, dataset has {num_classes} classes of width {d}",
                    kb.banks.len(),
                    kb.d()
                )));
            }
            Some(kb)
        }
        (false, _) => None,
    };

    let train_bags: Vec<&PatchBag> = subset
        .interleaved()
        .into_iter()
        .map(|id| {
            dataset
                .bag(id)
                .ok_or_else(|| MuseError::data(format!("few-shot slide {id} is not in the dataset")))
        })
        .collect::<Result<_>>()?;
    if train_bags.is_empty() {
        return Err(MuseError::data("few-shot subset is empty"));
    }
    let val_bags = dataset.split(Split::Val);

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let semantics = dataset.class_embeddings()?;
    let mut net =
        Network::init(config.architecture(kind, d, num_classes), &mut init_rng, semantics.as_ref())?;
    if let Some(attn) = &mut net.attn {
        attn.softmax_over_all = config.softmax_over_all;
    }
    let mut opt = AdamW::new(config.adamw(), &net);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5ee_d0f0_4de5);
    let noise = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0a15e);

    let mut log = TrainLog { warnings: subset.warnings.clone(), ..TrainLog::default() };
    let mut best: Option<((f64, f64), Network, AdamW, usize)> = None;
    let mut since_best = 0;
    let features: Vec<Mat> = train_bags.iter().map(|b| b.features_f64()).collect();
    let mut learner = Learner { net: &mut net, opt: &mut opt, noise, config };

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_bags.len()).collect();
        fisher_yates(&mut order, &mut order_rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        let mut aux_steps = 0;
        for &i in &order {
            let bag = train_bags[i];
            let label = bag.label;
            let retrieval_seed: u64 = order_rng.random();
            let Some(kb) = kb else {
                loss_sum += learner.step(&features[i], label, View::Plain)?;
                steps += 1;
                continue;
            };
            let f = learner.net.represent(bag)?;
            let adapter = learner.net.adapter.as_ref().expect("muse has an adapter");
            let mut queue =
                retrieve(f.view(), kb, label, config.m, config.retrieval, adapter, retrieval_seed)?;
            if queue.len() < config.m {
                let msg = format!("category {label} yielded {} of {} texts", queue.len(), config.m);
                if !log.warnings.contains(&msg) {
                    log.warnings.push(msg);
                }
            }
            let Some(mean) = queue.mean_feature() else {
                log::warn!("empty retrieval for bag {}; training on z alone", bag.slide_id);
                loss_sum += learner.step(&features[i], label, View::Plain)?;
                steps += 1;
                continue;
            };
            let align = (config.align_weight > 0.0).then_some(&mean);
            let z0 = config.literal_algorithm1.then(|| learner.net.head.classify(f.view()));
            match config.optimization {
                Optimization::Stochastic => {
                    while let Some((t, _)) = queue.dequeue() {
                        let view = match &z0 {
                            Some(z) => View::Literal { z, f: &f, text: &t, align },
                            None => View::Text { text: &t, align },
                        };
                        loss_sum += learner.step(&features[i], label, view)?;
                        steps += 1;
                        aux_steps += 1;
                    }
                }
                Optimization::MultiMean => {
                    let view = match &z0 {
                        Some(z) => View::Literal { z, f: &f, text: &mean, align },
                        None => View::Text { text: &mean, align },
                    };
                    loss_sum += learner.step(&features[i], label, view)?;
                    steps += 1;
                    aux_steps += 1;
                }
            }
        }
        log.total_steps += steps;

        let val = if val_bags.is_empty() { None } else { Some(evaluate(learner.net, &val_bags)?) };
        let train_loss = loss_sum / steps.max(1) as f64;
        let score = val.as_ref().map_or((-train_loss, -train_loss), |v| monitored(v, config.early_stop));
        let improved = best.as_ref().is_none_or(|(s, ..)| score > *s);
        if improved {
            best = Some((score, learner.net.clone(), learner.opt.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            steps,
            aux_steps,
            val: val.as_ref().map(|v| v.metrics),
            val_loss: val.as_ref().map(|v| v.loss),
            best: improved,
        });
        log::debug!("epoch {epoch}: loss {train_loss:.4}, {steps} steps");
        if since_best >= config.patience {
            log.stopped_early = epoch < config.epochs;
            break;
        }
    }

    let last_epoch = log.epochs.last().map_or(0, |e| e.epoch);
    let (_, network, optimizer, best_epoch) = best.expect("at least one epoch ran");
    log.best_epoch = best_epoch;
    Ok(TrainOutcome {
        state: ModelState {
            network,
            optimizer,
            class_names: manifest.class_names.clone(),
            epoch: last_epoch,
            best_epoch,
        },
        log,
    })
}

pub const CHECKPOINT_INDEX: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    file: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointIndex {
    architecture: Architecture,
    softmax_over_all: bool,
    class_names: Vec<String>,
    epoch: usize,
    best_epoch: usize,
    optimizer: AdamWConfig,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

fn tensor_file(dir: &Path, file: &str, m: &Mat) -> Result<()> {
    let path = dir.join(file);
    binary::write_f64(&path, m)?;
    let sidecar = Sidecar {
        slide_id: file.trim_end_matches(".bin").to_string(),
        n: m.nrows(),
        d: m.ncols(),
        label: 0,
        dtype: Dtype::F64,
    };
    binary::write_json(&binary::sidecar_path(&path), &sidecar)
}

/// Writes every tensor (parameters, then optimizer moments) as 64-bit files
/// under `dir`, plus a JSON index.
pub fn save_checkpoint(state: &ModelState, dir: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let params = state.network.tensors();
    for (i, (name, m)) in params.iter().enumerate() {
        let file = format!("tensors/{i:03}.bin");
        tensor_file(dir, &file, m)?;
        tensors.push(TensorEntry { name: name.clone(), file, rows: m.nrows(), cols: m.ncols() });
    }
    for (which, moments) in [("first", &state.optimizer.first), ("second", &state.optimizer.second)] {
        for (i, ((name, _), m)) in params.iter().zip(moments.iter()).enumerate() {
            let file = format!("optimizer/{which}.{i:03}.bin");
            tensor_file(dir, &file, m)?;
            tensors.push(TensorEntry {
                name: format!("adamw.{which}.{name}"),
                file,
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
    }
    let index = CheckpointIndex {
        architecture: state.network.arch.clone(),
        softmax_over_all: state.network.attn.as_ref().is_some_and(|a| a.softmax_over_all),
        class_names: state.class_names.clone(),
        epoch: state.epoch,
        best_epoch: state.best_epoch,
        optimizer: state.optimizer.config,
        optimizer_step: state.optimizer.step,
        tensors,
    };
    binary::write_json(&dir.join(CHECKPOINT_INDEX), &index)
}

fn read_tensor(dir: &Path, entry: &TensorEntry) -> Result<Mat> {
    let path = dir.join(&entry.file);
    let sidecar = binary::read_sidecar(&binary::sidecar_path(&path))?;
    if (sidecar.n, sidecar.d) != (entry.rows, entry.cols) {
        return Err(MuseError::format(&path, "sidecar shape disagrees with checkpoint index"));
    }
    match sidecar.dtype {
        Dtype::F64 => binary::read_f64(&path, &sidecar),
        Dtype::F32 => Ok(binary::read_f32(&path, &sidecar)?.mapv(f64::from)),
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelState> {
    let index_path = dir.join(CHECKPOINT_INDEX);
    let index: CheckpointIndex = binary::read_json(&index_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut network = Network::init(index.architecture.clone(), &mut rng, None)?;
    if let Some(attn) = &mut network.attn {
        attn.softmax_over_all = index.softmax_over_all;
    }
    let names: Vec<String> = network.tensors().into_iter().map(|(n, _)| n).collect();
    let count = names.len();
    if index.tensors.len() != 3 * count {
        return Err(MuseError::format(
            &index_path,
            format!("expected {} tensors, index lists {}", 3 * count, index.tensors.len()),
        ));
    }
    let mut loaded = Vec::with_capacity(index.tensors.len());
    for (i, entry) in index.tensors.iter().enumerate() {
        let base = &names[i % count];
        let want = match i / count {
            0 => base.clone(),
            1 => format!("adamw.first.{base}"),
            _ => format!("adamw.second.{base}"),
        };
        if entry.name != want {
            return Err(MuseError::format(
                &index_path,
                format!("tensor {i} is {}, expected {want}", entry.name),
            ));
        }
        loaded.push(read_tensor(dir, entry)?);
    }
    let second = loaded.split_off(2 * count);
    let first = loaded.split_off(count);
    for (slot, value) in network.tensors_mut().into_iter().zip(loaded) {
        if slot.dim() != value.dim() {
            return Err(MuseError::format(&index_path, "tensor shape disagrees with the architecture"));
        }
        *slot = value;
    }
    if !network.all_finite() {
        return Err(MuseError::NonFinite(format!(
            "checkpoint {} holds non-finite parameters",
            dir.display()
        )));
    }
    Ok(ModelState {
        network,
        optimizer: AdamW { config: index.optimizer, step: index.optimizer_step, first, second },
        class_names: index.class_names,
        epoch: index.epoch,
        best_epoch: index.best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, sample_few_shot, SyntheticSpec};

    fn tiny() -> (Dataset, KnowledgeBase) {
        let spec = SyntheticSpec {
            d: 16,
            bags_per_class: 15,
            min_patches: 8,
            max_patches: 12,
            texts_per_category: 30,
            ..SyntheticSpec::default()
        };
        let data = generate(&spec).unwrap();
        let kb = KnowledgeBase::from_synthetic(&data).unwrap();
        let ds = data.dataset().unwrap();
        (ds, kb)
    }

    fn cfg() -> TrainConfig {
        TrainConfig { epochs: 1, heads: 2, experts: 4, lr: 1e-3, ..TrainConfig::default() }
    }

    #[test]
    fn stochastic_steps_are_m_per_bag() {
        let (ds, kb) = tiny();
        let subset = sample_few_shot(&ds.manifest, 4, 1).unwrap();
        let out = train(&ds, &subset, Some(&kb), ModelKind::Muse, &cfg()).unwrap();
        assert_eq!(out.log.total_steps, 20 * 8);
        assert_eq!(out.state.optimizer.step, 160);
    }

    #[test]
    fn multi_mean_steps_once_per_bag() {
        let (ds, kb) = tiny();
        let subset = sample_few_shot(&ds.manifest, 4, 1).unwrap();
        let config = TrainConfig { optimization: Optimization::MultiMean, ..cfg() };
        let out = train(&ds, &subset, Some(&kb), ModelKind::Muse, &config).unwrap();
        assert_eq!(out.log.total_steps, 8);
    }

    #[test]
    fn kb_required_only_with_views() {
        let (ds, _) = tiny();
        let subset = sample_few_shot(&ds.manifest, 2, 1).unwrap();
        assert!(train(&ds, &subset, None, ModelKind::Muse, &cfg()).unwrap_err().is_config());
        let config = TrainConfig { smmo: false, ..cfg() };
        let out = train(&ds, &subset, None, ModelKind::Muse, &config).unwrap();
        assert_eq!(out.log.total_steps, 4);
        let out = train(&ds, &subset, None, ModelKind::AttnMil, &cfg()).unwrap();
        assert_eq!(out.log.total_steps, 4);
    }

    #[test]
    fn batch_size_other_than_one_rejected() {
        let config = TrainConfig { batch_size: 4, ..cfg() };
        assert!(config.validate().unwrap_err().is_config());
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, kb) = tiny();
        let subset = sample_few_shot(&ds.manifest, 2, 3).unwrap();
        let config = TrainConfig { epochs: 2, m: 3, ..cfg() };
        let a = train(&ds, &subset, Some(&kb), ModelKind::Muse, &config).unwrap();
        let b = train(&ds, &subset, Some(&kb), ModelKind::Muse, &config).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn literal_mode_runs_same_step_count() {
        let (ds, kb) = tiny();
        let subset = sample_few_shot(&ds.manifest, 2, 3).unwrap();
        let config = TrainConfig { m: 5, literal_algorithm1: true, ..cfg() };
        let out = train(&ds, &subset, Some(&kb), ModelKind::Muse, &config).unwrap();
        assert_eq!(out.log.total_steps, 20);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let (ds, kb) = tiny();
        let subset = sample_few_shot(&ds.manifest, 2, 3).unwrap();
        let config = TrainConfig { m: 2, ..cfg() };
        let out = train(&ds, &subset, Some(&kb), ModelKind::Muse, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&out.state, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, out.state);
    }
}
