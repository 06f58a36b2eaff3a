//! Straight-line reference implementations used by the integration tests.
//! Each one recomputes a quantity from scratch with plain loops, sharing no
//! code with the library beyond its public data types.
#![allow(dead_code)]

use muse_core::autograd::Mat;
use muse_core::{AttentionParams, ExpertPool, PatchBag, RetrievalStrategy};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in [-scale, scale].
pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..=scale))
}

pub fn bag_of(features: &Mat, label: usize) -> PatchBag {
    PatchBag::new("oracle", features.mapv(|v| v as f32), label).unwrap()
}

/// `k` best indices by repeated scanning: strictly larger wins, so the first
/// (lowest) index survives among equals.
pub fn scan_top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; values.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(values.len()) {
        let mut best: Option<usize> = None;
        for i in 0..values.len() {
            if taken[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if values[i] > values[b] => best = Some(i),
                _ => {}
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

fn dot_col(row: &[f64], m: &Mat, col: usize) -> f64 {
    let mut s = 0.0;
    for (l, x) in row.iter().enumerate() {
        s += x * m[[l, col]];
    }
    s
}

fn row_times(row: &[f64], m: &Mat) -> Vec<f64> {
    (0..m.ncols()).map(|c| dot_col(row, m, c)).collect()
}

/// Noise-free router scores and top-k selection for every row of `d`.
pub fn naive_routing(d: &Mat, pool: &ExpertPool) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let mut scores = Vec::new();
    let mut chosen = Vec::new();
    for i in 0..d.nrows() {
        let row: Vec<f64> = d.row(i).to_vec();
        let s = row_times(&row, &pool.router);
        chosen.push(scan_top_k(&s, pool.top_k));
        scores.push(s);
    }
    (scores, chosen)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for x in xs {
        if *x > m {
            m = *x;
        }
    }
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn keep_count(n: usize, top_percent: f64) -> usize {
    let c = (n as f64 * top_percent / 100.0).floor() as usize;
    if c == 0 {
        1
    } else if c > n {
        n
    } else {
        c
    }
}

pub struct NaiveAttention {
    pub output: Vec<f64>,
    pub retained: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

/// Multi-head cross-attention of one cue over `features`, keeping the top
/// `top_percent` of patches per head. `filtered == false` ignores the
/// percentage and attends to every patch.
pub fn naive_attention(cue: &[f64], features: &Mat, p: &AttentionParams, filtered: bool) -> NaiveAttention {
    let n = features.nrows();
    let mut concat = Vec::new();
    let mut retained = Vec::new();
    let mut weights = Vec::new();
    for h in 0..p.query.len() {
        let q = row_times(cue, &p.query[h]);
        let dh = q.len() as f64;
        let mut scores = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let x: Vec<f64> = features.row(i).to_vec();
            let k = row_times(&x, &p.key[h]);
            let mut s = 0.0;
            for a in 0..q.len() {
                s += q[a] * k[a];
            }
            scores.push(s / dh.sqrt());
            values.push(row_times(&x, &p.value[h]));
        }
        let keep =
            if filtered { scan_top_k(&scores, keep_count(n, p.top_percent)) } else { (0..n).collect() };
        let w = if p.softmax_over_all && filtered {
            let all = softmax(&scores);
            keep.iter().map(|&i| all[i]).collect()
        } else {
            softmax(&keep.iter().map(|&i| scores[i]).collect::<Vec<_>>())
        };
        let mut out = vec![0.0; values[0].len()];
        for (wi, &i) in w.iter().zip(&keep) {
            for (o, v) in out.iter_mut().zip(&values[i]) {
                *o += wi * v;
            }
        }
        concat.extend(out);
        retained.push(keep);
        weights.push(w);
    }
    NaiveAttention { output: row_times(&concat, &p.output), retained, weights }
}

/// Semantic prior with every cue attending, expert weights softmaxed over
/// the selected scores and the result averaged over source rows.
pub fn naive_prior(source: &Mat, features: &Mat, pool: &ExpertPool, attn: &AttentionParams) -> Vec<f64> {
    let (scores, chosen) = naive_routing(source, pool);
    let d = source.ncols();
    let mut f = vec![0.0; d];
    for i in 0..source.nrows() {
        let row: Vec<f64> = source.row(i).to_vec();
        let sel: Vec<f64> = chosen[i].iter().map(|&e| scores[i][e]).collect();
        let w = softmax(&sel);
        for (wj, &e) in w.iter().zip(&chosen[i]) {
            let cue = row_times(&row, &pool.experts[e]);
            let out = naive_attention(&cue, features, attn, true).output;
            for (a, o) in f.iter_mut().zip(out) {
                *a += wj * o / source.nrows() as f64;
            }
        }
    }
    f
}

/// Bank indices ranked best first by a full scan; ties go to the lower index.
pub fn brute_force_rank(query: &[f64], bank: &Array2<f32>, strategy: RetrievalStrategy) -> Vec<usize> {
    let score = |i: usize| -> f64 {
        let row = bank.row(i);
        match strategy {
            RetrievalStrategy::Cosine => {
                let (mut dot, mut qq, mut bb) = (0.0, 0.0, 0.0);
                for (q, b) in query.iter().zip(row.iter()) {
                    let b = f64::from(*b);
                    dot += q * b;
                    qq += q * q;
                    bb += b * b;
                }
                dot / (qq.sqrt() * bb.sqrt())
            }
            RetrievalStrategy::L2 => {
                let mut s = 0.0;
                for (q, b) in query.iter().zip(row.iter()) {
                    s += (q - f64::from(*b)).powi(2);
                }
                -s.sqrt()
            }
            RetrievalStrategy::Random => panic!("random retrieval has no ranking"),
        }
    };
    let all: Vec<f64> = (0..bank.nrows()).map(score).collect();
    scan_top_k(&all, bank.nrows())
}

/// AUC as the fraction of (positive, negative) pairs ordered correctly.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &pi) in positive.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positive.iter().enumerate() {
            if pj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Macro F1 from an explicit confusion matrix over classes that occur in
/// either the labels or the predictions.
#[allow(clippy::needless_range_loop)]
pub fn confusion_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    let mut conf = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        conf[l][p] += 1;
    }
    let mut total = 0.0;
    let mut classes = 0;
    for c in 0..num_classes {
        let tp = conf[c][c] as f64;
        let row: usize = conf[c].iter().sum();
        let col: usize = (0..num_classes).map(|r| conf[r][c]).sum();
        if row + col == 0 {
            continue;
        }
        let fp = col as f64 - tp;
        let fn_ = row as f64 - tp;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        total += if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        classes += 1;
    }
    if classes == 0 {
        0.0
    } else {
        total / classes as f64
    }
}

/// Accuracy of the generator's Bayes rule on the bag mean: with orthonormal
/// prototypes and isotropic noise the likelihood is maximised by the largest
/// projection of the mean onto a prototype.
pub fn prototype_oracle_accuracy(prototypes: &Mat, bags: &[&PatchBag]) -> f64 {
    let mut correct = 0;
    for bag in bags {
        let d = bag.d();
        let mut mean = vec![0.0; d];
        for row in bag.features.rows() {
            for (m, v) in mean.iter_mut().zip(row.iter()) {
                *m += f64::from(*v) / bag.n() as f64;
            }
        }
        let proj: Vec<f64> =
            (0..prototypes.nrows()).map(|c| (0..d).map(|j| prototypes[[c, j]] * mean[j]).sum()).collect();
        if scan_top_k(&proj, 1)[0] == bag.label {
            correct += 1;
        }
    }
    correct as f64 / bags.len() as f64
}
