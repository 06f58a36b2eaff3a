//! Sample-wise vision-text interaction: filtered multi-head cross-attention
//! from semantic cues onto a bag's patches, fused into a semantic prior.
//!
//! Per head `h`, a cue scores every patch with
//! `(cue W^Q_h)(B W^K_h)^T / sqrt(d_head)`, keeps the
//! `max(1, floor(N * r / 100))` best patches (ties to the lower patch index),
//! and attends over the kept value rows only. Heads are concatenated and
//! projected by `W^O`.

use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax, Mat, Tape, Var};
use crate::data::PatchBag;
use crate::dsr::{route_on_tape, top_k_indices, ExpertPool};
use crate::error::{MuseError, Result};
use crate::params::{near_identity, Parameters};

/// How category rows become queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interaction {
    /// Expert-routed cues with top-r% patch filtering.
    #[default]
    Fine,
    /// Each category row is its own single query over all patches.
    Plain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = Mat> {
    /// Per-head `d x d_head` projections.
    pub query: Vec<T>,
    pub key: Vec<T>,
    pub value: Vec<T>,
    /// `(H * d_head) x d`.
    pub output: T,
    /// Percentage of patches kept per head, in (0, 100].
    pub top_percent: f64,
    /// Normalise over all N scores and then drop the filtered ones, instead
    /// of normalising over the kept scores only.
    pub softmax_over_all: bool,
}

impl<T> AttentionParams<T> {
    pub fn heads(&self) -> usize {
        self.query.len()
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            query: self.query.iter().map(&mut *f).collect(),
            key: self.key.iter().map(&mut *f).collect(),
            value: self.value.iter().map(&mut *f).collect(),
            output: f(&self.output),
            top_percent: self.top_percent,
            softmax_over_all: self.softmax_over_all,
        }
    }
}

fn check_top_percent(r: f64) -> Result<()> {
    if r > 0.0 && r <= 100.0 {
        Ok(())
    } else {
        Err(MuseError::config(format!("top-patch percentage must lie in (0, 100], got {r}")))
    }
}

impl AttentionParams {
    /// Head `h` starts as the identity on its own block of `d_head` input
    /// dimensions; `W^O` starts near the identity.
    pub fn init(rng: &mut impl Rng, d: usize, heads: usize, top_percent: f64) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(MuseError::config(format!("d = {d} is not divisible into {heads} heads")));
        }
        check_top_percent(top_percent)?;
        let dh = d / heads;
        let jitter = 0.02 / (d as f64).sqrt();
        let block = |rng: &mut _, h| near_identity(rng, d, dh, h * dh, jitter);
        let query = (0..heads).map(|h| block(rng, h)).collect();
        let key = (0..heads).map(|h| block(rng, h)).collect();
        let value = (0..heads).map(|h| block(rng, h)).collect();
        let output = near_identity(rng, d, d, 0, jitter);
        Ok(Self { query, key, value, output, top_percent, softmax_over_all: false })
    }

    pub fn d_head(&self) -> usize {
        self.query.first().map_or(0, Mat::ncols)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        check_top_percent(self.top_percent)?;
        let h = self.heads();
        let dh = self.d_head();
        if h == 0 || h * dh != d {
            return Err(MuseError::config(format!("H * d_head = {h} * {dh} does not equal d = {d}")));
        }
        let head_ok = |ms: &[Mat]| ms.len() == h && ms.iter().all(|m| m.dim() == (d, dh));
        if !head_ok(&self.query) || !head_ok(&self.key) || !head_ok(&self.value) {
            return Err(MuseError::config("per-head projection shapes disagree"));
        }
        if self.output.dim() != (h * dh, d) {
            return Err(MuseError::config("output projection shape disagrees"));
        }
        Ok(())
    }
}

impl Parameters for AttentionParams {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (name, ms) in [("query", &self.query), ("key", &self.key), ("value", &self.value)] {
            out.extend(ms.iter().enumerate().map(|(h, m)| (format!("attn.{name}.{h}"), m)));
        }
        out.push(("attn.output".into(), &self.output));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = Vec::new();
        out.extend(self.query.iter_mut());
        out.extend(self.key.iter_mut());
        out.extend(self.value.iter_mut());
        out.push(&mut self.output);
        out
    }
}

/// Number of patches kept out of `n` at `top_percent`.
pub fn retained_count(n: usize, top_percent: f64) -> usize {
    ((n as f64 * top_percent / 100.0).floor() as usize).clamp(1, n.max(1))
}

/// Per-head key and value projections of a bag, shared by every cue.
#[derive(Debug, Clone)]
pub(crate) struct BagProjection {
    keys: Vec<Var>,
    values: Vec<Var>,
    n: usize,
}

pub(crate) fn project_bag(tape: &mut Tape, bag: Var, attn: &AttentionParams<Var>) -> BagProjection {
    let n = tape.value(bag).nrows();
    let keys = attn.key.iter().map(|&w| tape.matmul(bag, w)).collect();
    let values = attn.value.iter().map(|&w| tape.matmul(bag, w)).collect();
    BagProjection { keys, values, n }
}

#[derive(Debug, Clone)]
pub(crate) struct Attended {
    pub fused: Var,
    pub retained: Vec<Vec<usize>>,
    pub weights: Vec<Var>,
}

pub(crate) fn attend_on_tape(
    tape: &mut Tape,
    cue: Var,
    proj: &BagProjection,
    attn: &AttentionParams<Var>,
    top_percent: f64,
) -> Attended {
    let n_keep = retained_count(proj.n, top_percent);
    let mut heads = Vec::with_capacity(attn.heads());
    let mut retained = Vec::with_capacity(attn.heads());
    let mut weights = Vec::with_capacity(attn.heads());
    for h in 0..attn.heads() {
        let q = tape.matmul(cue, attn.query[h]);
        let raw = tape.matmul_t(q, proj.keys[h]);
        let dh = tape.value(q).ncols() as f64;
        let scores = tape.scale(raw, 1.0 / dh.sqrt());
        let keep = top_k_indices(tape.value(scores).row(0).as_slice().expect("row"), n_keep);
        let w = if attn.softmax_over_all {
            let all = tape.softmax_rows(scores);
            tape.select_cols(all, keep.clone())
        } else {
            let kept = tape.select_cols(scores, keep.clone());
            tape.softmax_rows(kept)
        };
        let v = tape.select_rows(proj.values[h], keep.clone());
        heads.push(tape.matmul(w, v));
        retained.push(keep);
        weights.push(w);
    }
    let cat = tape.concat_cols(heads);
    let fused = tape.matmul(cat, attn.output);
    Attended { fused, retained, weights }
}

#[derive(Debug, Clone)]
pub(crate) struct PriorOnTape {
    pub f: Var,
    pub per_class: Vec<Var>,
    pub per_cue: Vec<Vec<Var>>,
    /// Normalised expert weights per class (1 x k).
    pub weights: Vec<Var>,
    pub selected: Vec<Vec<usize>>,
}

/// Route, decompose, attend and fuse for every row of `source`, then average.
pub(crate) fn prior_on_tape(
    tape: &mut Tape,
    source: Var,
    proj: &BagProjection,
    pool: Option<&ExpertPool<Var>>,
    attn: &AttentionParams<Var>,
    interaction: Interaction,
    noise: Option<&mut ChaCha8Rng>,
) -> PriorOnTape {
    let rows = tape.value(source).nrows();
    let mut per_class = Vec::with_capacity(rows);
    let mut per_cue = Vec::with_capacity(rows);
    let mut weights = Vec::with_capacity(rows);
    let mut selected = Vec::with_capacity(rows);
    match interaction {
        Interaction::Fine => {
            let pool = pool.expect("fine interaction needs an expert pool");
            let (scores, chosen) = route_on_tape(tape, source, pool, noise);
            for (i, experts) in chosen.into_iter().enumerate() {
                let row = tape.select_rows(source, vec![i]);
                let cues: Vec<Var> = experts
                    .iter()
                    .map(|&e| {
                        let cue = tape.matmul(row, pool.experts[e]);
                        attend_on_tape(tape, cue, proj, attn, attn.top_percent).fused
                    })
                    .collect();
                let s = tape.gather(scores, experts.iter().map(|&e| (i, e)).collect());
                let w = tape.softmax_rows(s);
                let stacked = tape.concat_rows(cues.clone());
                per_class.push(tape.matmul(w, stacked));
                per_cue.push(cues);
                weights.push(w);
                selected.push(experts);
            }
        }
        Interaction::Plain => {
            for i in 0..rows {
                let row = tape.select_rows(source, vec![i]);
                let fused = attend_on_tape(tape, row, proj, attn, 100.0).fused;
                let w = tape.constant(Mat::ones((1, 1)));
                per_class.push(fused);
                per_cue.push(vec![fused]);
                weights.push(w);
                selected.push(Vec::new());
            }
        }
    }
    let stacked = tape.concat_rows(per_class.clone());
    let f = tape.mean_rows(stacked);
    PriorOnTape { f, per_class, per_cue, weights, selected }
}

/// Output of one cue attending over a bag.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDetail {
    pub output: Array1<f64>,
    /// Kept patch indices per head, best first.
    pub retained: Vec<Vec<usize>>,
    /// Attention weights per head, aligned with `retained`.
    pub weights: Vec<Vec<f64>>,
}

pub fn cross_attend_detailed(
    cue: ArrayView1<f64>,
    features: &Mat,
    params: &AttentionParams,
) -> Result<AttentionDetail> {
    let d = features.ncols();
    params.validate(d)?;
    if cue.len() != d {
        return Err(MuseError::data(format!("cue width {} but bag d = {d}", cue.len())));
    }
    if features.nrows() == 0 {
        return Err(MuseError::data("bag has no patches"));
    }
    let mut tape = Tape::new();
    let bag = tape.constant(features.clone());
    let bound = params.map(&mut |m| tape.constant(m.clone()));
    let q = tape.constant(cue.to_owned().insert_axis(ndarray::Axis(0)));
    let proj = project_bag(&mut tape, bag, &bound);
    let out = attend_on_tape(&mut tape, q, &proj, &bound, params.top_percent);
    Ok(AttentionDetail {
        output: tape.value(out.fused).row(0).to_owned(),
        retained: out.retained,
        weights: out.weights.iter().map(|w| tape.value(*w).row(0).to_vec()).collect(),
    })
}

/// Fused representation `f_ij` of one cue over a bag.
pub fn cross_attend(cue: ArrayView1<f64>, bag: &PatchBag, params: &AttentionParams) -> Result<Array1<f64>> {
    Ok(cross_attend_detailed(cue, &bag.features_f64(), params)?.output)
}

/// `f_i = sum_j softmax(scores)_j f_ij`
pub fn fuse_cues(fused: &[Array1<f64>], scores: &[f64]) -> Result<Array1<f64>> {
    if fused.is_empty() || fused.len() != scores.len() {
        return Err(MuseError::internal(format!(
            "{} fused vectors for {} scores",
            fused.len(),
            scores.len()
        )));
    }
    let d = fused[0].len();
    if fused.iter().any(|f| f.len() != d) {
        return Err(MuseError::internal("fused vectors differ in width"));
    }
    let w = softmax(scores);
    let mut out = Array1::zeros(d);
    for (f, wj) in fused.iter().zip(w) {
        out.scaled_add(wj, f);
    }
    Ok(out)
}

/// The semantic prior of a bag with respect to a semantic source.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPrior {
    pub f: Array1<f64>,
    pub per_class: Vec<Array1<f64>>,
    pub per_cue: Vec<Vec<Array1<f64>>>,
    /// Normalised expert weights per source row.
    pub weights: Vec<Vec<f64>>,
    pub selected: Vec<Vec<usize>>,
}

/// Computes the prior of `bag` for every row of `source` (the class matrix or
/// a single retrieved text feature) and averages over rows.
pub fn forward_prior(
    source: &Mat,
    bag: &PatchBag,
    pool: &ExpertPool,
    attn: &AttentionParams,
    interaction: Interaction,
    noise_on: bool,
    seed: u64,
) -> Result<SemanticPrior> {
    let d = bag.d();
    if source.ncols() != d || source.nrows() == 0 {
        return Err(MuseError::data(format!(
            "semantic source is {}x{}, bag d = {d}",
            source.nrows(),
            source.ncols()
        )));
    }
    pool.validate(d)?;
    attn.validate(d)?;
    let mut tape = Tape::new();
    let bag_var = tape.constant(bag.features_f64());
    let src = tape.constant(source.clone());
    let pool_v = pool.map(&mut |m| tape.constant(m.clone()));
    let attn_v = attn.map(&mut |m| tape.constant(m.clone()));
    let proj = project_bag(&mut tape, bag_var, &attn_v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = prior_on_tape(
        &mut tape,
        src,
        &proj,
        Some(&pool_v),
        &attn_v,
        interaction,
        noise_on.then_some(&mut rng),
    );
    let row = |v: Var| tape.value(v).row(0).to_owned();
    Ok(SemanticPrior {
        f: row(out.f),
        per_class: out.per_class.iter().map(|v| row(*v)).collect(),
        per_cue: out.per_cue.iter().map(|c| c.iter().map(|v| row(*v)).collect()).collect(),
        weights: out.weights.iter().map(|v| tape.value(*v).row(0).to_vec()).collect(),
        selected: out.selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal;
    use ndarray::Array2;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn bag(features: Mat) -> PatchBag {
        PatchBag::new("b", features.mapv(|v| v as f32), 0).unwrap()
    }

    #[test]
    fn retained_count_never_empty() {
        assert_eq!(retained_count(1, 20.0), 1);
        assert_eq!(retained_count(10, 20.0), 2);
        assert_eq!(retained_count(9, 20.0), 1);
        assert_eq!(retained_count(7, 100.0), 7);
        assert_eq!(retained_count(3, 0.001), 1);
    }

    #[test]
    fn single_patch_passes_values_through() {
        let mut r = rng(1);
        let attn = AttentionParams::init(&mut r, 8, 2, 20.0).unwrap();
        let feats = normal(&mut r, (1, 8), 1.0);
        let cue = normal(&mut r, (1, 8), 1.0).row(0).to_owned();
        let detail = cross_attend_detailed(cue.view(), &feats, &attn).unwrap();
        let heads: Vec<Mat> = attn.value.iter().map(|w| feats.dot(w)).collect();
        let views: Vec<_> = heads.iter().map(|h| h.view()).collect();
        let want = ndarray::concatenate(ndarray::Axis(1), &views).unwrap().dot(&attn.output);
        for (a, b) in detail.output.iter().zip(want.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(detail.weights.iter().all(|w| w == &vec![1.0]));
    }

    #[test]
    fn identical_patches_match_single_patch() {
        let mut r = rng(2);
        let attn = AttentionParams::init(&mut r, 8, 4, 20.0).unwrap();
        let row = normal(&mut r, (1, 8), 1.0);
        let cue = normal(&mut r, (1, 8), 1.0).row(0).to_owned();
        let one = cross_attend(cue.view(), &bag(row.clone()), &attn).unwrap();
        for r_pct in [10.0, 50.0, 100.0] {
            let attn = AttentionParams { top_percent: r_pct, ..attn.clone() };
            let many = Array2::from_shape_fn((9, 8), |(_, j)| row[[0, j]]);
            let out = cross_attend(cue.view(), &bag(many), &attn).unwrap();
            for (a, b) in out.iter().zip(one.iter()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn head_mismatch_is_config_error() {
        let mut r = rng(3);
        assert!(AttentionParams::init(&mut r, 10, 4, 20.0).unwrap_err().is_config());
        assert!(AttentionParams::init(&mut r, 8, 4, 0.0).unwrap_err().is_config());
        let mut attn = AttentionParams::init(&mut r, 8, 4, 20.0).unwrap();
        attn.query.pop();
        let err = cross_attend_detailed(Array1::zeros(8).view(), &Mat::zeros((3, 8)), &attn).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn fuse_singleton_and_symmetric() {
        let a = Array1::from(vec![1.0, 2.0]);
        let b = Array1::from(vec![3.0, -2.0]);
        assert_eq!(fuse_cues(std::slice::from_ref(&a), &[5.0]).unwrap(), a);
        let mid = fuse_cues(&[a.clone(), b.clone()], &[0.7, 0.7]).unwrap();
        assert_eq!(mid, (&a + &b) / 2.0);
        assert!(fuse_cues(&[a], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn fuse_matches_scalar_softmax() {
        let a = Array1::from(vec![1.0, 0.0]);
        let b = Array1::from(vec![0.0, 1.0]);
        let e2 = 2f64.exp();
        let out = fuse_cues(&[a, b], &[2.0, 0.0]).unwrap();
        assert!((out[0] - e2 / (e2 + 1.0)).abs() < 1e-9);
        assert!((out[1] - 1.0 / (e2 + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn weights_sum_to_one_either_way() {
        let mut r = rng(4);
        let mut attn = AttentionParams::init(&mut r, 8, 2, 30.0).unwrap();
        let feats = normal(&mut r, (10, 8), 1.0);
        let cue = normal(&mut r, (1, 8), 1.0).row(0).to_owned();
        let detail = cross_attend_detailed(cue.view(), &feats, &attn).unwrap();
        for w in &detail.weights {
            assert_eq!(w.len(), 3);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        attn.softmax_over_all = true;
        let masked = cross_attend_detailed(cue.view(), &feats, &attn).unwrap();
        for w in &masked.weights {
            assert!(w.iter().sum::<f64>() < 1.0);
        }
    }

    #[test]
    fn single_row_source_is_its_own_mean() {
        let mut r = rng(5);
        let pool = ExpertPool::init(&mut r, 8, 3, 2).unwrap();
        let attn = AttentionParams::init(&mut r, 8, 2, 50.0).unwrap();
        let b = bag(normal(&mut r, (6, 8), 1.0));
        let src = normal(&mut r, (1, 8), 1.0);
        let prior = forward_prior(&src, &b, &pool, &attn, Interaction::Fine, false, 0).unwrap();
        assert_eq!(prior.per_class.len(), 1);
        for (a, b) in prior.f.iter().zip(prior.per_class[0].iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((prior.weights[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_semantics_give_zero_prior() {
        let mut r = rng(6);
        let mut pool = ExpertPool::init(&mut r, 8, 3, 2).unwrap();
        pool.experts.iter_mut().for_each(|e| *e = Mat::eye(8));
        let attn = AttentionParams::init(&mut r, 8, 2, 20.0).unwrap();
        let b = bag(normal(&mut r, (6, 8), 1.0));
        let prior =
            forward_prior(&Mat::zeros((2, 8)), &b, &pool, &attn, Interaction::Fine, false, 0).unwrap();
        // Zero cues give uniform attention, but the values are bag features;
        // zero values are what make the prior vanish.
        let zero_bag = bag(Mat::zeros((6, 8)));
        let zero =
            forward_prior(&Mat::zeros((2, 8)), &zero_bag, &pool, &attn, Interaction::Fine, false, 0).unwrap();
        assert!(zero.f.iter().all(|v| *v == 0.0));
        assert!(prior.f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn plain_interaction_uses_every_patch() {
        let mut r = rng(7);
        let pool = ExpertPool::init(&mut r, 8, 3, 2).unwrap();
        let attn = AttentionParams::init(&mut r, 8, 2, 10.0).unwrap();
        let b = bag(normal(&mut r, (12, 8), 1.0));
        let src = normal(&mut r, (2, 8), 1.0);
        let prior = forward_prior(&src, &b, &pool, &attn, Interaction::Plain, false, 0).unwrap();
        let full = AttentionParams { top_percent: 100.0, ..attn.clone() };
        let direct = cross_attend(src.row(0), &b, &full).unwrap();
        for (a, b) in prior.per_class[0].iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
