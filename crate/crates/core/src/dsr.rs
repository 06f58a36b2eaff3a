//! Decompositional semantic refinement: noisy top-k routing of category
//! semantics over a shared pool of expert query matrices, and decomposition of
//! each category vector into per-expert semantic cues.

use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{MuseError, Result};
use crate::params::{near_identity, normal, Parameters};

/// How the category semantic matrix `D` is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SemanticsBackend {
    /// `D` is itself the trainable tensor.
    #[default]
    Direct,
    /// `D` comes from encoding learnable prompt tokens with a text encoder.
    PromptEncoder,
}

/// Text encoder applied to `[V]_1 .. [V]_M [class]` prompt sequences.
///
/// No pretrained encoder ships with this crate; implementors wrap their own
/// model and the resulting rows seed a `Direct` semantics matrix.
pub trait PromptEncoder {
    /// Encodes the prompt token embeddings (`M x d`) for `class_name` into a
    /// single `d`-vector.
    fn encode(&self, prompts: &Mat, class_name: &str) -> Result<Array1<f64>>;
}

/// Learnable prompt tokens per class, encoded through a [`PromptEncoder`].
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTokens {
    /// One `M x d` block per class.
    pub tokens: Vec<Mat>,
}

/// Category semantics `D` (`|C| x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySemantics {
    pub matrix: Mat,
    pub backend: SemanticsBackend,
}

impl CategorySemantics {
    pub fn direct(matrix: Mat) -> Result<Self> {
        if matrix.nrows() < 2 {
            return Err(MuseError::config("category semantics need at least two classes"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(MuseError::data("category semantics contain non-finite values"));
        }
        Ok(Self { matrix, backend: SemanticsBackend::Direct })
    }

    /// Builds `D` by encoding each class's prompt tokens.
    pub fn from_prompts(
        encoder: &dyn PromptEncoder,
        prompts: &PromptTokens,
        class_names: &[String],
    ) -> Result<Self> {
        if prompts.tokens.len() != class_names.len() {
            return Err(MuseError::config("one prompt block per class is required"));
        }
        let rows = prompts
            .tokens
            .iter()
            .zip(class_names)
            .map(|(t, name)| encoder.encode(t, name))
            .collect::<Result<Vec<_>>>()?;
        let d = rows.first().map_or(0, Array1::len);
        let mut matrix = Mat::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(MuseError::data("prompt encoder returned inconsistent widths"));
            }
            matrix.row_mut(i).assign(r);
        }
        let mut out = Self::direct(matrix)?;
        out.backend = SemanticsBackend::PromptEncoder;
        Ok(out)
    }
}

/// Shared pool of `R` expert query matrices plus the router.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPool<T = Mat> {
    /// `R` matrices, each `d x d`.
    pub experts: Vec<T>,
    /// Router projection `G`, `d x R`.
    pub router: T,
    /// Noise-scale projection, `d x R`.
    pub noise: T,
    pub top_k: usize,
}

impl<T> ExpertPool<T> {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ExpertPool<U> {
        ExpertPool {
            experts: self.experts.iter().map(&mut *f).collect(),
            router: f(&self.router),
            noise: f(&self.noise),
            top_k: self.top_k,
        }
    }
}

impl ExpertPool {
    /// Experts start near the identity so initial cues resemble the category
    /// vector; the router starts small and random.
    pub fn init(rng: &mut impl Rng, d: usize, num_experts: usize, top_k: usize) -> Result<Self> {
        if num_experts == 0 || top_k == 0 || top_k > num_experts {
            return Err(MuseError::config(format!("need 1 <= k <= R, got k = {top_k}, R = {num_experts}")));
        }
        let scale = 1.0 / (d as f64).sqrt();
        Ok(Self {
            experts: (0..num_experts).map(|_| near_identity(rng, d, d, 0, 0.05 * scale)).collect(),
            router: normal(rng, (d, num_experts), scale),
            noise: normal(rng, (d, num_experts), scale),
            top_k,
        })
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let r = self.num_experts();
        if self.top_k == 0 || self.top_k > r {
            return Err(MuseError::config(format!("need 1 <= k <= R, got k = {}, R = {r}", self.top_k)));
        }
        if self.experts.iter().any(|e| e.dim() != (d, d))
            || self.router.dim() != (d, r)
            || self.noise.dim() != (d, r)
        {
            return Err(MuseError::config("expert pool shapes disagree with d and R"));
        }
        Ok(())
    }
}

impl Parameters for ExpertPool {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> =
            self.experts.iter().enumerate().map(|(i, e)| (format!("experts.{i}"), e)).collect();
        out.push(("router".into(), &self.router));
        out.push(("router_noise".into(), &self.noise));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = self.experts.iter_mut().collect();
        out.push(&mut self.router);
        out.push(&mut self.noise);
        out
    }
}

/// Router output for every category row.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingResult {
    /// `|C| x R` scores.
    pub scores: Mat,
    /// Selected expert indices per row, highest score first.
    pub selected: Vec<Vec<usize>>,
    /// The raw scores of the selected experts, aligned with `selected`.
    pub selected_scores: Vec<Vec<f64>>,
}

/// Indices of the `k` largest values, highest first; equal values go to the
/// lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Records `S = G(D) + [noise] * eta * softplus(D W_noise)` on the tape and
/// picks the top-k experts per row.
pub(crate) fn route_on_tape(
    tape: &mut Tape,
    source: Var,
    pool: &ExpertPool<Var>,
    noise: Option<&mut ChaCha8Rng>,
) -> (Var, Vec<Vec<usize>>) {
    let mut scores = tape.matmul(source, pool.router);
    if let Some(rng) = noise {
        let pre = tape.matmul(source, pool.noise);
        let scale = tape.softplus(pre);
        let dim = tape.value(scale).dim();
        let eta = Mat::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
        let eta = tape.constant(eta);
        let jitter = tape.mul(eta, scale);
        scores = tape.add(scores, jitter);
    }
    let selected =
        tape.value(scores).rows().into_iter().map(|row| top_k_indices(&row.to_vec(), pool.top_k)).collect();
    (scores, selected)
}

/// Scores every expert for every row of `semantics` and selects the top-k.
///
/// With `noise_on == false` the result is a pure function of the inputs.
pub fn route(semantics: &Mat, pool: &ExpertPool, noise_on: bool, seed: u64) -> Result<RoutingResult> {
    pool.validate(semantics.ncols())?;
    let mut tape = Tape::new();
    let src = tape.constant(semantics.clone());
    let bound = pool.map(&mut |m| tape.constant(m.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (scores, selected) = route_on_tape(&mut tape, src, &bound, noise_on.then_some(&mut rng));
    let scores = tape.value(scores).clone();
    let selected_scores =
        selected.iter().enumerate().map(|(i, idx)| idx.iter().map(|&j| scores[[i, j]]).collect()).collect();
    Ok(RoutingResult { scores, selected, selected_scores })
}

/// Semantic cues `Q_ij = D_i W^Q_j` for the selected experts, in the given order.
pub fn decompose(row: ArrayView1<f64>, selected: &[usize], pool: &ExpertPool) -> Result<Vec<Array1<f64>>> {
    selected
        .iter()
        .map(|&j| {
            let w = pool.experts.get(j).ok_or_else(|| {
                MuseError::internal(format!("expert index {j} outside [0, {})", pool.num_experts()))
            })?;
            if w.nrows() != row.len() {
                return Err(MuseError::internal("cue width disagrees with expert shape"));
            }
            Ok(row.dot(w))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pool_with_router(router: Mat, k: usize) -> ExpertPool {
        let (d, r) = router.dim();
        ExpertPool {
            experts: (0..r).map(|_| Mat::eye(d)).collect(),
            noise: Mat::zeros((d, r)),
            router,
            top_k: k,
        }
    }

    #[test]
    fn picks_two_largest() {
        // With D = I the router scores are the router rows themselves.
        let router = array![[0.3, 0.9, 0.1], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let d = Mat::eye(3);
        let out = route(&d, &pool_with_router(router, 2), false, 0).unwrap();
        assert_eq!(out.selected[0], vec![1, 0]);
        assert_eq!(out.selected_scores[0], vec![0.9, 0.3]);
    }

    #[test]
    fn tie_goes_to_lower_index() {
        let router = array![[0.5, 0.5, 0.1], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let out = route(&Mat::eye(3), &pool_with_router(router, 1), false, 0).unwrap();
        assert_eq!(out.selected[0], vec![0]);
        // An all-zero row ties everywhere.
        assert_eq!(out.selected[1], vec![0]);
    }

    #[test]
    fn k_above_r_is_config_error() {
        let pool = pool_with_router(Mat::zeros((3, 2)), 3);
        assert!(route(&Mat::eye(3), &pool, false, 0).unwrap_err().is_config());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ExpertPool::init(&mut rng, 4, 2, 3).unwrap_err().is_config());
    }

    #[test]
    fn noise_only_when_enabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool = ExpertPool::init(&mut rng, 6, 8, 2).unwrap();
        let d = normal(&mut rng, (3, 6), 1.0);
        let clean = route(&d, &pool, false, 1).unwrap();
        assert_eq!(clean, route(&d, &pool, false, 99).unwrap());
        assert_eq!(clean.scores, d.dot(&pool.router));
        let noisy = route(&d, &pool, true, 1).unwrap();
        assert_ne!(noisy.scores, clean.scores);
        assert_eq!(noisy, route(&d, &pool, true, 1).unwrap());
    }

    #[test]
    fn identity_experts_reproduce_the_row() {
        let pool = pool_with_router(Mat::zeros((3, 4)), 2);
        let row = array![1.0, -2.0, 0.5];
        let cues = decompose(row.view(), &[2, 0], &pool).unwrap();
        assert_eq!(cues, vec![row.clone(), row]);
    }

    #[test]
    fn zero_row_gives_zero_cues() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = ExpertPool::init(&mut rng, 5, 4, 2).unwrap();
        let cues = decompose(Array1::zeros(5).view(), &[1, 3], &pool).unwrap();
        assert!(cues.iter().all(|c| c.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn out_of_range_expert_is_internal_error() {
        let pool = pool_with_router(Mat::zeros((3, 2)), 1);
        let err = decompose(array![1.0, 0.0, 0.0].view(), &[2], &pool).unwrap_err();
        assert!(matches!(err, MuseError::Internal(_)));
    }

    #[test]
    fn cues_match_naive_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pool = ExpertPool::init(&mut rng, 7, 5, 3).unwrap();
        let row = normal(&mut rng, (1, 7), 1.0).row(0).to_owned();
        let cues = decompose(row.view(), &[4, 1, 2], &pool).unwrap();
        for (cue, &e) in cues.iter().zip(&[4usize, 1, 2]) {
            for j in 0..7 {
                let mut acc = 0.0;
                for i in 0..7 {
                    acc += row[i] * pool.experts[e][[i, j]];
                }
                assert!((cue[j] - acc).abs() < 1e-6);
            }
        }
    }

    struct MeanEncoder;

    impl PromptEncoder for MeanEncoder {
        fn encode(&self, prompts: &Mat, _class: &str) -> Result<Array1<f64>> {
            Ok(prompts.mean_axis(ndarray::Axis(0)).unwrap())
        }
    }

    #[test]
    fn prompt_backend_encodes_each_class() {
        let prompts =
            PromptTokens { tokens: vec![array![[1.0, 0.0], [3.0, 0.0]], array![[0.0, 2.0], [0.0, 4.0]]] };
        let names = vec!["a".to_string(), "b".to_string()];
        let sem = CategorySemantics::from_prompts(&MeanEncoder, &prompts, &names).unwrap();
        assert_eq!(sem.backend, SemanticsBackend::PromptEncoder);
        assert_eq!(sem.matrix, array![[2.0, 0.0], [0.0, 3.0]]);
    }
}
