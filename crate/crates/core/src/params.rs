//! Named parameter collections, seeded initialisers and the AdamW optimizer.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;

/// A fixed, ordered collection of trainable tensors.
///
/// `tensors` and `tensors_mut` must enumerate the same tensors in the same
/// order; the optimizer and the checkpoint format rely on it.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, &Mat)>;
    fn tensors_mut(&mut self) -> Vec<&mut Mat>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Name of the first tensor holding a non-finite value.
    fn first_non_finite(&self) -> Option<String> {
        self.tensors().into_iter().find(|(_, t)| t.iter().any(|v| !v.is_finite())).map(|(name, _)| name)
    }
}

pub fn normal(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Mat {
    Array2::from_shape_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// Glorot-normal initialisation.
pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    normal(rng, (rows, cols), std)
}

/// Identity (or an identity column block) plus small Gaussian jitter.
pub fn near_identity(rng: &mut impl Rng, rows: usize, cols: usize, offset: usize, jitter: f64) -> Mat {
    let mut m = normal(rng, (rows, cols), jitter);
    for j in 0..cols {
        if offset + j < rows {
            m[[offset + j, j]] += 1.0;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, weight_decay: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Mat>,
    pub second: Vec<Mat>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &impl Parameters) -> Self {
        let zeros: Vec<Mat> = params.tensors().iter().map(|(_, t)| Mat::zeros(t.raw_dim())).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }

    /// Applies one update. `grads` must be ordered like `params.tensors()`.
    pub fn update<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        let grads = grads.tensors();
        for (((p, (_, g)), m), v) in
            params.tensors_mut().into_iter().zip(grads).zip(self.first.iter_mut()).zip(self.second.iter_mut())
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *p);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    struct One(Mat);

    impl Parameters for One {
        fn tensors(&self) -> Vec<(String, &Mat)> {
            vec![("w".into(), &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Mat> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = One(array![[1.0, -2.0]]);
        let g = One(array![[0.5, -3.0]]);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.update(&mut p, &g);
        // m_hat / sqrt(v_hat) = sign(g) on the first step.
        assert!((p.0[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.0[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = One(array![[2.0]]);
        let g = One(array![[0.0]]);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.update(&mut p, &g);
        assert!((p.0[[0, 0]] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = One(array![[3.0, -4.0]]);
        let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        for _ in 0..2000 {
            let g = One(p.0.mapv(|x| 2.0 * x));
            opt.update(&mut p, &g);
        }
        assert!(p.0.iter().all(|x| x.abs() < 1e-2));
    }
}
