//! Hyperparameter grid search on a stratified validation split.

use rayon::prelude::*;

use super::{train_matrix, DetectorError, DetectorKind, MlpOptimizer, TrainConfig};
use crate::dataset::LabeledExample;
use crate::evaluation::{f1_score, stratified_indices};

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub config: TrainConfig,
    /// Validation F1 at the config's threshold.
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best: TrainConfig,
    pub rows: Vec<GridRow>,
}

/// 27 boosting configs: learning rate {0.1, 0.05, 0.01}, then depth
/// {3, 5, 10}, then estimators {100, 200, 300}.
pub fn gb_supplement_grid(base: &TrainConfig) -> Vec<TrainConfig> {
    let mut out = Vec::with_capacity(27);
    for rate in [0.1, 0.05, 0.01] {
        for depth in [3, 5, 10] {
            for estimators in [100, 200, 300] {
                out.push(TrainConfig {
                    kind: DetectorKind::Gb,
                    gb_learning_rate: rate,
                    gb_max_depth: depth,
                    gb_estimators: estimators,
                    ..base.clone()
                });
            }
        }
    }
    out
}

/// 18 perceptron configs: hidden {32, 64, 128}, then learning rate
/// {0.1, 0.01, 0.001}, then optimizer {Adam, SGD}.
pub fn mlp_supplement_grid(base: &TrainConfig) -> Vec<TrainConfig> {
    let mut out = Vec::with_capacity(18);
    for hidden in [32, 64, 128] {
        for rate in [0.1, 0.01, 0.001] {
            for optimizer in [MlpOptimizer::Adam, MlpOptimizer::Sgd] {
                out.push(TrainConfig {
                    kind: DetectorKind::Mlp,
                    mlp_hidden: hidden,
                    mlp_lr: rate,
                    mlp_optimizer: optimizer,
                    ..base.clone()
                });
            }
        }
    }
    out
}

/// Trains every config on the training part and scores F1 on the held-out
/// part. Ties keep the earliest config.
pub fn grid_search(
    examples: &[LabeledExample],
    valid_fraction: f64,
    grid: &[TrainConfig],
    seed: u64,
) -> Result<GridResult, DetectorError> {
    if grid.is_empty() {
        return Err(DetectorError::InvalidConfig("empty grid".into()));
    }
    for config in grid {
        config.validate()?;
    }
    let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
    let (train_idx, valid_idx) =
        stratified_indices(&labels, valid_fraction, seed).map_err(DetectorError::Split)?;
    let names = examples
        .first()
        .map(|e| e.features.feature_names.clone())
        .unwrap_or_default();
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<bool>) {
        idx.iter()
            .map(|&i| (examples[i].features.to_vec(), examples[i].label))
            .unzip()
    };
    let (x_train, y_train) = pick(&train_idx);
    let (x_valid, y_valid) = pick(&valid_idx);

    let rows = grid
        .par_iter()
        .map(|config| {
            let d = train_matrix(x_train.clone(), y_train.clone(), names.clone(), config)?;
            let scores = d.predict_all(&x_valid)?;
            Ok(GridRow {
                config: config.clone(),
                f1: f1_score(&scores, &y_valid, config.threshold),
            })
        })
        .collect::<Result<Vec<_>, DetectorError>>()?;
    let mut best = 0;
    for (i, row) in rows.iter().enumerate() {
        if row.f1 > rows[best].f1 {
            best = i;
        }
    }
    Ok(GridResult {
        best: rows[best].config.clone(),
        rows,
    })
}

impl GridResult {
    /// CSV table with the hyperparameters of each row's kind and F1 in
    /// percent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,learning_rate,max_depth,estimators,hidden,optimizer,l2,f1_pct\n");
        for row in &self.rows {
            let c = &row.config;
            let line = match c.kind {
                DetectorKind::Gb => format!(
                    "gb,{},{},{},,,,{:.2}",
                    c.gb_learning_rate,
                    c.gb_max_depth,
                    c.gb_estimators,
                    row.f1 * 100.0
                ),
                DetectorKind::Mlp => format!(
                    "mlp,{},,,{},{},,{:.2}",
                    c.mlp_lr,
                    c.mlp_hidden,
                    c.mlp_optimizer,
                    row.f1 * 100.0
                ),
                DetectorKind::Lr => format!("lr,,,,,,{},{:.2}", c.lr_l2, row.f1 * 100.0),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// Threshold in the candidate set maximizing F1; ties keep the lowest.
pub fn calibrate_threshold(scores: &[f64], labels: &[bool]) -> f64 {
    let mut best = (0.5, f1_score(scores, labels, 0.5));
    for i in 1..100 {
        let t = i as f64 / 100.0;
        let f = f1_score(scores, labels, t);
        if f > best.1 || (f == best.1 && t < best.0) {
            best = (t, f);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureVector;

    fn example(i: usize, x: [f64; 2], label: bool) -> LabeledExample {
        let fv = FeatureVector::new(x[0], vec![x[1]], vec![0.0], vec![0.0], vec![1], vec![]);
        LabeledExample {
            sample_id: format!("s{i}"),
            features: fv,
            label,
        }
    }

    #[test]
    fn supplement_grid_shapes() {
        let base = TrainConfig::default();
        let gb = gb_supplement_grid(&base);
        assert_eq!(gb.len(), 27);
        assert_eq!(
            (gb[0].gb_learning_rate, gb[0].gb_max_depth, gb[0].gb_estimators),
            (0.1, 3, 100)
        );
        assert_eq!(
            (gb[7].gb_learning_rate, gb[7].gb_max_depth, gb[7].gb_estimators),
            (0.1, 10, 200)
        );
        assert_eq!(
            (gb[26].gb_learning_rate, gb[26].gb_max_depth, gb[26].gb_estimators),
            (0.01, 10, 300)
        );
        let mlp = mlp_supplement_grid(&base);
        assert_eq!(mlp.len(), 18);
        assert_eq!((mlp[15].mlp_hidden, mlp[15].mlp_lr, mlp[15].mlp_optimizer), (128, 0.01, MlpOptimizer::Sgd));
    }

    /// XOR in two features: a single split cannot separate it.
    fn xor_examples() -> Vec<LabeledExample> {
        (0..200)
            .map(|i| {
                let a = ((i * 37) % 100) as f64 / 100.0;
                let b = ((i * 61 + 13) % 100) as f64 / 100.0;
                example(i, [a, b], (a > 0.5) != (b > 0.5))
            })
            .collect()
    }

    #[test]
    fn single_config_is_returned() {
        let cfg = TrainConfig {
            gb_estimators: 5,
            gb_max_depth: 2,
            ..TrainConfig::with_kind(DetectorKind::Gb)
        };
        let r = grid_search(&xor_examples(), 0.1, std::slice::from_ref(&cfg), 1).unwrap();
        assert_eq!(r.best, cfg);
        assert_eq!(r.rows.len(), 1);
    }

    #[test]
    fn deeper_trees_win_on_xor() {
        let base = TrainConfig {
            gb_estimators: 20,
            gb_learning_rate: 0.5,
            ..TrainConfig::with_kind(DetectorKind::Gb)
        };
        let grid = vec![
            TrainConfig {
                gb_max_depth: 1,
                ..base.clone()
            },
            TrainConfig {
                gb_max_depth: 3,
                ..base
            },
        ];
        let r = grid_search(&xor_examples(), 0.2, &grid, 4).unwrap();
        assert_eq!(r.best.gb_max_depth, 3, "{:?}", r.rows);
        assert!(r.rows[1].f1 > r.rows[0].f1);
        assert_eq!(r.to_csv().lines().count(), 3);
    }

    #[test]
    fn empty_grid_is_an_error() {
        assert!(matches!(
            grid_search(&xor_examples(), 0.1, &[], 0),
            Err(DetectorError::InvalidConfig(_))
        ));
    }

    #[test]
    fn calibration_prefers_separating_threshold() {
        let scores = [0.1, 0.2, 0.3, 0.35, 0.4, 0.9];
        let labels = [false, false, false, true, true, true];
        let t = calibrate_threshold(&scores, &labels);
        assert!(t > 0.3 && t <= 0.35);
    }
}
