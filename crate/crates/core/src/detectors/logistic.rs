use super::lbfgs::{minimize, LbfgsOptions};
use super::{sigmoid, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticModel {
    pub fn logit(&self, z: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(z).map(|(w, x)| w * x).sum::<f64>()
    }
}

/// `log(1 + exp(m))` without overflow.
fn softplus(m: f64) -> f64 {
    if m > 0.0 {
        m + (-m).exp().ln_1p()
    } else {
        m.exp().ln_1p()
    }
}

/// Fits on standardized rows. The bias is not penalized.
pub(super) fn fit(x: &[Vec<f64>], y: &[bool], config: &TrainConfig) -> LogisticModel {
    let p = x[0].len();
    let c = config.lr_l2;
    let objective = |theta: &[f64], grad: &mut [f64]| {
        let (w, b) = theta.split_at(p);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (row, &label) in x.iter().zip(y) {
            let m = b[0] + w.iter().zip(row).map(|(wi, xi)| wi * xi).sum::<f64>();
            let t = if label { 1.0 } else { 0.0 };
            loss += softplus(m) - t * m;
            let r = sigmoid(m) - t;
            grad[..p].iter_mut().zip(row).for_each(|(g, xi)| *g += r * xi);
            grad[p] += r;
        }
        loss *= c;
        grad.iter_mut().for_each(|g| *g *= c);
        for (g, wi) in grad[..p].iter_mut().zip(w) {
            *g += wi;
        }
        loss + 0.5 * w.iter().map(|v| v * v).sum::<f64>()
    };
    let opts = LbfgsOptions {
        max_iterations: config.lr_iterations,
        ..LbfgsOptions::default()
    };
    let result = minimize(objective, vec![0.0; p + 1], opts);
    let bias = result.x[p];
    let mut weights = result.x;
    weights.truncate(p);
    LogisticModel { weights, bias }
}

#[cfg(test)]
mod tests {
    use super::super::{train_matrix, DetectorKind};
    use super::*;

    #[test]
    fn separable_1d() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let label = i % 2 == 0;
            let noise = (i as f64 * 0.37).sin() * 1e-3;
            x.push(vec![if label { 1.0 } else { 0.0 } + noise]);
            y.push(label);
        }
        let d = train_matrix(x.clone(), y.clone(), vec![], &TrainConfig::with_kind(DetectorKind::Lr)).unwrap();
        let acc = x
            .iter()
            .zip(&y)
            .filter(|(r, &l)| (d.predict_proba(r).unwrap() >= 0.5) == l)
            .count();
        assert_eq!(acc, 40);
        assert!(d.predict_proba(&[1.0]).unwrap() > 0.9);
    }

    #[test]
    fn gradient_vanishes_at_optimum() {
        let x = vec![vec![0.5, -1.0], vec![1.5, 0.2], vec![-0.3, 0.7], vec![2.0, 1.0], vec![-1.0, -0.5]];
        let y = vec![true, true, false, true, false];
        let cfg = TrainConfig {
            lr_l2: 0.7,
            ..TrainConfig::with_kind(DetectorKind::Lr)
        };
        let m = fit(&x, &y, &cfg);
        let mut gw = m.weights.clone();
        let mut gb = 0.0;
        for (row, &l) in x.iter().zip(&y) {
            let r = sigmoid(m.logit(row)) - if l { 1.0 } else { 0.0 };
            gw.iter_mut().zip(row).for_each(|(g, xi)| *g += 0.7 * r * xi);
            gb += 0.7 * r;
        }
        assert!(gw.iter().all(|g| g.abs() < 1e-6) && gb.abs() < 1e-6);
    }

    #[test]
    fn invariant_to_column_rescaling() {
        let x: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i as f64 * 0.91).sin(), (i as f64 * 0.13).cos() * 3.0])
            .collect();
        let y: Vec<bool> = (0..30).map(|i| (i * 7) % 5 < 2).collect();
        let cfg = TrainConfig::with_kind(DetectorKind::Lr);
        let a = train_matrix(x.clone(), y.clone(), vec![], &cfg).unwrap();
        let scaled: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] * 250.0 - 4.0, r[1]]).collect();
        let b = train_matrix(scaled.clone(), y, vec![], &cfg).unwrap();
        for (r, s) in x.iter().zip(&scaled) {
            let (pa, pb) = (a.predict_proba(r).unwrap(), b.predict_proba(s).unwrap());
            assert!((pa - pb).abs() < 1e-9, "{pa} vs {pb}");
        }
    }
}
