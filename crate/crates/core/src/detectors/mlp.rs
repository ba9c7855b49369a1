//! One-hidden-layer perceptron: ReLU hidden units, sigmoid output, mean
//! binary cross-entropy, full-batch updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sigmoid, MlpOptimizer, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub hidden: usize,
    /// `hidden x inputs`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MlpModel {
    pub fn inputs(&self) -> usize {
        self.w1.len() / self.hidden.max(1)
    }

    fn hidden_activations(&self, z: &[f64], out: &mut [f64]) {
        let p = z.len();
        for (j, a) in out.iter_mut().enumerate() {
            let row = &self.w1[j * p..(j + 1) * p];
            let pre = self.b1[j] + row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>();
            *a = pre.max(0.0);
        }
    }

    pub fn logit(&self, z: &[f64]) -> f64 {
        let mut h = vec![0.0; self.hidden];
        self.hidden_activations(z, &mut h);
        self.b2 + self.w2.iter().zip(&h).map(|(w, a)| w * a).sum::<f64>()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Fits on standardized rows.
pub(super) fn fit(x: &[Vec<f64>], y: &[bool], config: &TrainConfig) -> MlpModel {
    let n = x.len();
    let p = x[0].len();
    let k = config.mlp_hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let b_in = 1.0 / (p as f64).sqrt();
    let b_out = 1.0 / (k as f64).sqrt();

    // Parameters packed as [w1 | b1 | w2 | b2].
    let (o_b1, o_w2, o_b2) = (k * p, k * p + k, k * p + 2 * k);
    let mut theta = vec![0.0; o_b2 + 1];
    for w in &mut theta[..o_b1] {
        *w = rng.random_range(-b_in..b_in);
    }
    for w in &mut theta[o_w2..o_b2] {
        *w = rng.random_range(-b_out..b_out);
    }

    let mut grad = vec![0.0; theta.len()];
    let mut pre = vec![0.0; k];
    let mut adam = Adam::new(theta.len());
    let inv_n = 1.0 / n as f64;
    for _ in 0..config.mlp_epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (z, &label) in x.iter().zip(y) {
            for (j, a) in pre.iter_mut().enumerate() {
                let row = &theta[j * p..(j + 1) * p];
                *a = theta[o_b1 + j] + row.iter().zip(z).map(|(w, xi)| w * xi).sum::<f64>();
            }
            let out = theta[o_b2]
                + pre
                    .iter()
                    .zip(&theta[o_w2..o_b2])
                    .map(|(a, w)| a.max(0.0) * w)
                    .sum::<f64>();
            let delta = (sigmoid(out) - if label { 1.0 } else { 0.0 }) * inv_n;
            grad[o_b2] += delta;
            for j in 0..k {
                if pre[j] <= 0.0 {
                    continue;
                }
                grad[o_w2 + j] += delta * pre[j];
                let back = delta * theta[o_w2 + j];
                grad[o_b1 + j] += back;
                grad[j * p..(j + 1) * p]
                    .iter_mut()
                    .zip(z)
                    .for_each(|(g, xi)| *g += back * xi);
            }
        }
        match config.mlp_optimizer {
            MlpOptimizer::Sgd => theta
                .iter_mut()
                .zip(&grad)
                .for_each(|(t, g)| *t -= config.mlp_lr * g),
            MlpOptimizer::Adam => adam.step(&mut theta, &grad, config.mlp_lr),
        }
    }

    MlpModel {
        hidden: k,
        w1: theta[..o_b1].to_vec(),
        b1: theta[o_b1..o_w2].to_vec(),
        w2: theta[o_w2..o_b2].to_vec(),
        b2: theta[o_b2],
    }
}

#[cfg(test)]
mod tests {
    use super::super::{train_matrix, DetectorKind};
    use super::*;

    fn xor_data() -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let (a, b) = ((i & 1) as f64, ((i >> 1) & 1) as f64);
            let jitter = (i as f64 * 0.77).sin() * 0.05;
            x.push(vec![a + jitter, b - jitter]);
            y.push((i & 1) != ((i >> 1) & 1));
        }
        (x, y)
    }

    fn accuracy(cfg: &TrainConfig) -> f64 {
        let (x, y) = xor_data();
        let d = train_matrix(x.clone(), y.clone(), vec![], cfg).unwrap();
        let hits = x
            .iter()
            .zip(&y)
            .filter(|(r, &l)| (d.predict_proba(r).unwrap() >= 0.5) == l)
            .count();
        hits as f64 / x.len() as f64
    }

    #[test]
    fn learns_xor_for_some_seed() {
        let best = (0..5)
            .map(|seed| {
                accuracy(&TrainConfig {
                    mlp_hidden: 8,
                    seed,
                    ..TrainConfig::with_kind(DetectorKind::Mlp)
                })
            })
            .fold(0.0, f64::max);
        assert!(best >= 0.95, "best accuracy {best}");
    }

    #[test]
    fn adam_learns_xor_for_some_seed() {
        let best = (0..5)
            .map(|seed| {
                accuracy(&TrainConfig {
                    mlp_hidden: 8,
                    mlp_lr: 0.05,
                    mlp_epochs: 500,
                    mlp_optimizer: MlpOptimizer::Adam,
                    seed,
                    ..TrainConfig::with_kind(DetectorKind::Mlp)
                })
            })
            .fold(0.0, f64::max);
        assert!(best >= 0.95, "best accuracy {best}");
    }

    #[test]
    fn deterministic_under_seed() {
        let (x, y) = xor_data();
        let cfg = TrainConfig {
            mlp_hidden: 4,
            mlp_epochs: 50,
            seed: 9,
            ..TrainConfig::with_kind(DetectorKind::Mlp)
        };
        let a = fit(&x, &y, &cfg);
        let b = fit(&x, &y, &cfg);
        assert_eq!(a, b);
        let c = fit(&x, &y, &TrainConfig { seed: 10, ..cfg });
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let (x, y) = xor_data();
        let cfg = TrainConfig {
            mlp_hidden: 16,
            mlp_epochs: 1,
            mlp_lr: 1e-300,
            ..TrainConfig::with_kind(DetectorKind::Mlp)
        };
        let m = fit(&x, &y, &cfg);
        let b_in = 1.0 / 2f64.sqrt();
        assert!(m.w1.iter().all(|w| w.abs() <= b_in));
        assert!(m.w2.iter().all(|w| w.abs() <= 0.25));
    }
}
