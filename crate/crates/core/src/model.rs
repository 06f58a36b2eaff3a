//! Network definitions: MUSE and the comparison aggregators, all ending in
//! the same classifier MLP.

use ndarray::{Array1, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Mat, Tape, Var};
use crate::data::PatchBag;
use crate::dsr::ExpertPool;
use crate::error::{MuseError, Result};
use crate::kb::Adapter;
use crate::params::{normal, xavier, Parameters};
use crate::svti::{self, AttentionParams, Interaction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Muse,
    Mean,
    Max,
    AttnMil,
    BmTi,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [Self::Muse, Self::Mean, Self::Max, Self::AttnMil, Self::BmTi];

    pub fn name(self) -> &'static str {
        match self {
            Self::Muse => "muse",
            Self::Mean => "mean",
            Self::Max => "max",
            Self::AttnMil => "attn-mil",
            Self::BmTi => "bm-ti",
        }
    }

    pub fn is_baseline(self) -> bool {
        self != Self::Muse
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = MuseError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| MuseError::config(format!("unknown model kind {s}")))
    }
}

/// Shape-determining hyperparameters, stored alongside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub kind: ModelKind,
    pub d: usize,
    pub num_classes: usize,
    pub heads: usize,
    pub experts: usize,
    pub top_k: usize,
    pub top_percent: f64,
    pub interaction: Interaction,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.num_classes < 2 {
            return Err(MuseError::config("need d >= 1 and at least two classes"));
        }
        if self.kind == ModelKind::Muse {
            if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
                return Err(MuseError::config(format!(
                    "d = {} is not divisible into {} heads",
                    self.d, self.heads
                )));
            }
            if self.interaction == Interaction::Fine && (self.top_k == 0 || self.top_k > self.experts) {
                return Err(MuseError::config(format!(
                    "need 1 <= k <= R, got k = {}, R = {}",
                    self.top_k, self.experts
                )));
            }
            if !(self.top_percent > 0.0 && self.top_percent <= 100.0) {
                return Err(MuseError::config(format!(
                    "top-patch percentage must lie in (0, 100], got {}",
                    self.top_percent
                )));
            }
        }
        Ok(())
    }
}

/// `d -> hidden -> |C|` with a GELU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T = Mat> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> Mlp<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Mlp<U> {
        Mlp { w1: f(&self.w1), b1: f(&self.b1), w2: f(&self.w2), b2: f(&self.b2) }
    }
}

impl Mlp {
    pub fn init(rng: &mut impl Rng, d: usize, hidden: usize, classes: usize) -> Self {
        Self {
            w1: xavier(rng, d, hidden),
            b1: Mat::zeros((1, hidden)),
            w2: xavier(rng, hidden, classes),
            b2: Mat::zeros((1, classes)),
        }
    }

    /// Logits `z` for a single representation.
    pub fn classify(&self, f: ArrayView1<f64>) -> Array1<f64> {
        let h = (f.dot(&self.w1) + self.b1.row(0)).mapv(autograd::gelu);
        h.dot(&self.w2) + self.b2.row(0)
    }
}

impl Mlp<Var> {
    pub(crate) fn on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let h = tape.matmul(x, self.w1);
        let h = tape.add_row(h, self.b1);
        let h = tape.gelu(h);
        let z = tape.matmul(h, self.w2);
        tape.add_row(z, self.b2)
    }
}

/// `z_final = (z + z_aux) / 2`
pub fn fuse_logits(z: ArrayView1<f64>, z_aux: ArrayView1<f64>) -> Result<Array1<f64>> {
    if z.len() != z_aux.len() {
        return Err(MuseError::internal(format!("logit lengths differ: {} vs {}", z.len(), z_aux.len())));
    }
    Ok((&z + &z_aux) * 0.5)
}

/// Gated attention pooling: `a = softmax(w (tanh(B V) * sigmoid(B U))^T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedAttention<T = Mat> {
    /// `d x h`
    pub v: T,
    /// `d x h`
    pub u: T,
    /// `1 x h`
    pub w: T,
}

impl<T> GatedAttention<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> GatedAttention<U> {
        GatedAttention { v: f(&self.v), u: f(&self.u), w: f(&self.w) }
    }
}

impl GatedAttention {
    /// Attention weight of every patch of `features`.
    pub fn attention(&self, features: &Mat) -> Array1<f64> {
        let mut tape = Tape::new();
        let bound = self.map(&mut |m| tape.constant(m.clone()));
        let bag = tape.constant(features.clone());
        let w = bound.weights(&mut tape, bag);
        tape.value(w).row(0).to_owned()
    }
}

impl GatedAttention<Var> {
    /// Attention weights over the patches, `1 x N`.
    pub(crate) fn weights(&self, tape: &mut Tape, bag: Var) -> Var {
        let a = tape.matmul(bag, self.v);
        let a = tape.tanh(a);
        let b = tape.matmul(bag, self.u);
        let b = tape.sigmoid(b);
        let gated = tape.mul(a, b);
        let logits = tape.matmul_t(self.w, gated);
        tape.softmax_rows(logits)
    }
}

/// Every trainable tensor of one model. Components a kind does not use are
/// `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = Mat> {
    pub arch: Architecture,
    /// Category semantics `D` (`|C| x d`).
    pub semantics: Option<T>,
    pub pool: Option<ExpertPool<T>>,
    pub attn: Option<AttentionParams<T>>,
    pub adapter: Option<Adapter<T>>,
    pub gate: Option<GatedAttention<T>>,
    pub head: Mlp<T>,
}

impl<T> Network<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            semantics: self.semantics.as_ref().map(&mut *f),
            pool: self.pool.as_ref().map(|p| p.map(f)),
            attn: self.attn.as_ref().map(|a| a.map(f)),
            adapter: self.adapter.as_ref().map(|a| a.map(f)),
            gate: self.gate.as_ref().map(|g| g.map(f)),
            head: self.head.map(f),
        }
    }
}

impl Network {
    /// Fresh parameters. `semantics` seeds `D` when given (e.g. encoded class
    /// names); otherwise `D` is drawn at random.
    pub fn init(arch: Architecture, rng: &mut impl rand::RngCore, semantics: Option<&Mat>) -> Result<Self> {
        arch.validate()?;
        let (d, c) = (arch.d, arch.num_classes);
        let make_semantics = |rng: &mut dyn rand::RngCore| -> Result<Mat> {
            match semantics {
                Some(m) if m.dim() != (c, d) => Err(MuseError::data(format!(
                    "class embeddings are {}x{}, expected {c}x{d}",
                    m.nrows(),
                    m.ncols()
                ))),
                Some(m) => Ok(m.clone()),
                None => Ok(normal(&mut &mut *rng, (c, d), 1.0 / (d as f64).sqrt())),
            }
        };
        let (mut semantics_m, mut pool, mut attn, mut adapter, mut gate) = (None, None, None, None, None);
        match arch.kind {
            ModelKind::Muse => {
                semantics_m = Some(make_semantics(&mut *rng)?);
                if arch.interaction == Interaction::Fine {
                    pool = Some(ExpertPool::init(rng, d, arch.experts, arch.top_k)?);
                }
                let r = match arch.interaction {
                    Interaction::Fine => arch.top_percent,
                    Interaction::Plain => 100.0,
                };
                attn = Some(AttentionParams::init(rng, d, arch.heads, r)?);
                adapter = Some(Adapter::identity(d));
            }
            ModelKind::BmTi => {
                semantics_m = Some(make_semantics(&mut *rng)?);
                attn = Some(AttentionParams::init(rng, d, 1, 100.0)?);
            }
            ModelKind::AttnMil => {
                let h = (d / 2).max(1);
                gate =
                    Some(GatedAttention { v: xavier(rng, d, h), u: xavier(rng, d, h), w: xavier(rng, 1, h) });
            }
            ModelKind::Mean | ModelKind::Max => {}
        }
        let head = Mlp::init(rng, d, d, c);
        Ok(Network { arch, semantics: semantics_m, pool, attn, adapter, gate, head })
    }

    pub fn interaction(&self) -> Interaction {
        if self.pool.is_some() {
            Interaction::Fine
        } else {
            Interaction::Plain
        }
    }

    fn check_bag(&self, bag: &PatchBag) -> Result<()> {
        if bag.d() != self.arch.d {
            return Err(MuseError::data(format!(
                "bag {} has d = {}, model expects {}",
                bag.slide_id,
                bag.d(),
                self.arch.d
            )));
        }
        if bag.n() == 0 {
            return Err(MuseError::data(format!("bag {} has no patches", bag.slide_id)));
        }
        Ok(())
    }

    /// Bag representation (the semantic prior `f` for MUSE) with router noise off.
    pub fn represent(&self, bag: &PatchBag) -> Result<Array1<f64>> {
        self.check_bag(bag)?;
        let mut tape = Tape::new();
        let bound = self.map(&mut |m| tape.constant(m.clone()));
        let x = tape.constant(bag.features_f64());
        let ctx = bound.context(&mut tape, x);
        let f = bound.represent_on_tape(&mut tape, &ctx, None, None);
        Ok(tape.value(f).row(0).to_owned())
    }

    /// Logits for one bag. Uses only the bag and the model, never a knowledge base.
    pub fn logits(&self, bag: &PatchBag) -> Result<Array1<f64>> {
        let f = self.represent(bag)?;
        let z = self.head.classify(f.view());
        if z.iter().any(|v| !v.is_finite()) {
            return Err(MuseError::NonFinite(format!("logits for bag {}", bag.slide_id)));
        }
        Ok(z)
    }
}

/// Per-bag quantities shared by every forward pass over the same bag on one tape.
pub(crate) struct BagContext {
    pub bag: Var,
    pub proj: Option<svti::BagProjection>,
}

impl Network<Var> {
    pub(crate) fn context(&self, tape: &mut Tape, bag: Var) -> BagContext {
        let proj = self.attn.as_ref().map(|a| svti::project_bag(tape, bag, a));
        BagContext { bag, proj }
    }

    /// `1 x d` representation. `source` replaces `D` as the semantic source
    /// (used for retrieved text features); it is ignored by the pooling
    /// baselines.
    pub(crate) fn represent_on_tape(
        &self,
        tape: &mut Tape,
        ctx: &BagContext,
        source: Option<Var>,
        noise: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Var {
        match self.arch.kind {
            ModelKind::Mean => tape.mean_rows(ctx.bag),
            ModelKind::Max => tape.max_rows(ctx.bag),
            ModelKind::AttnMil => {
                let gate = self.gate.as_ref().expect("attn-mil has a gate");
                let w = gate.weights(tape, ctx.bag);
                tape.matmul(w, ctx.bag)
            }
            ModelKind::Muse | ModelKind::BmTi => {
                let attn = self.attn.as_ref().expect("attention parameters");
                let proj = ctx.proj.as_ref().expect("bag projection");
                let src = source.unwrap_or_else(|| self.semantics.expect("semantics"));
                let interaction = if self.pool.is_some() { Interaction::Fine } else { Interaction::Plain };
                svti::prior_on_tape(tape, src, proj, self.pool.as_ref(), attn, interaction, noise).f
            }
        }
    }
}

impl Parameters for Network {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        if let Some(s) = &self.semantics {
            out.push(("semantics".to_string(), s));
        }
        if let Some(p) = &self.pool {
            out.extend(p.tensors());
        }
        if let Some(a) = &self.attn {
            out.extend(a.tensors());
        }
        if let Some(a) = &self.adapter {
            out.extend(a.tensors());
        }
        if let Some(g) = &self.gate {
            out.push(("gate.v".into(), &g.v));
            out.push(("gate.u".into(), &g.u));
            out.push(("gate.w".into(), &g.w));
        }
        out.push(("head.w1".into(), &self.head.w1));
        out.push(("head.b1".into(), &self.head.b1));
        out.push(("head.w2".into(), &self.head.w2));
        out.push(("head.b2".into(), &self.head.b2));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = Vec::new();
        if let Some(s) = &mut self.semantics {
            out.push(s);
        }
        if let Some(p) = &mut self.pool {
            out.extend(p.tensors_mut());
        }
        if let Some(a) = &mut self.attn {
            out.extend(a.tensors_mut());
        }
        if let Some(a) = &mut self.adapter {
            out.extend(a.tensors_mut());
        }
        if let Some(g) = &mut self.gate {
            out.extend([&mut g.v, &mut g.u, &mut g.w]);
        }
        out.extend([&mut self.head.w1, &mut self.head.b1, &mut self.head.w2, &mut self.head.b2]);
        out
    }
}

/// Predicted label and softmax class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub scores: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn argmax(values: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Label prediction for one bag; deterministic and independent of any
/// knowledge base.
pub fn infer(bag: &PatchBag, model: &Network) -> Result<Prediction> {
    let z = model.logits(bag)?;
    Ok(Prediction {
        label: argmax(z.view()),
        scores: autograd::softmax(z.as_slice().expect("contiguous")),
        logits: z.to_vec(),
    })
}

/// Column means of a bag; used by the prototype oracle and tests.
pub fn bag_mean(bag: &PatchBag) -> Array1<f64> {
    bag.features_f64().mean_axis(Axis(0)).expect("non-empty bag")
}
