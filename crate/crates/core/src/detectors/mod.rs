//! Lightweight hallucination classifiers over feature vectors: L2-regularized
//! logistic regression (L-BFGS), gradient-boosted trees on logistic loss, and
//! a one-hidden-layer perceptron.

mod gbdt;
mod grid;
mod lbfgs;
mod logistic;
mod mlp;
mod persist;

pub use gbdt::{GbModel, Node, Tree};
pub use grid::{calibrate_threshold, gb_supplement_grid, grid_search, mlp_supplement_grid, GridResult, GridRow};
pub use lbfgs::{minimize, LbfgsOptions, LbfgsResult};
pub use logistic::LogisticModel;
pub use mlp::MlpModel;
pub use persist::{
    decode_detector, encode_detector, load_detector, save_detector, DETECTOR_MAGIC,
    DETECTOR_VERSION,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledExample;
use crate::features::FeatureVector;

/// Logits are clamped to this magnitude before the sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("training needs at least 2 examples, got {0}")]
    TooFewExamples(usize),
    #[error("training data contains a single class")]
    SingleClass,
    #[error("non-finite feature value in example {0}")]
    NonFiniteFeature(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("feature width {got} does not match the detector's {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("examples have inconsistent feature widths")]
    RaggedFeatures,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"ODET\"")]
    BadMagic([u8; 4]),
    #[error("unsupported detector version {0}")]
    UnsupportedVersion(u8),
    #[error("corrupt detector file: {0}")]
    Corrupt(String),
    #[error("detector file holds a {found} model, expected {expected}")]
    KindMismatch {
        expected: DetectorKind,
        found: DetectorKind,
    },
    #[error("split: {0}")]
    Split(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Lr,
    Gb,
    Mlp,
}

impl DetectorKind {
    pub fn code(self) -> u8 {
        match self {
            DetectorKind::Lr => 0,
            DetectorKind::Gb => 1,
            DetectorKind::Mlp => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DetectorKind::Lr),
            1 => Some(DetectorKind::Gb),
            2 => Some(DetectorKind::Mlp),
            _ => None,
        }
    }
}

impl std::fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DetectorKind::Lr => "lr",
            DetectorKind::Gb => "gb",
            DetectorKind::Mlp => "mlp",
        })
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lr" => Ok(DetectorKind::Lr),
            "gb" => Ok(DetectorKind::Gb),
            "mlp" => Ok(DetectorKind::Mlp),
            other => Err(format!("unknown detector kind {other:?} (lr, gb, mlp)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MlpOptimizer {
    /// Full-batch steepest descent.
    #[default]
    Sgd,
    /// Full-batch Adam (beta1 0.9, beta2 0.999, eps 1e-8).
    Adam,
}

impl std::fmt::Display for MlpOptimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MlpOptimizer::Sgd => "sgd",
            MlpOptimizer::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: DetectorKind,
    pub lr_iterations: usize,
    /// Inverse regularization strength `C`: the objective is
    /// `C * sum(log loss) + ||w||^2 / 2`.
    pub lr_l2: f64,
    pub gb_estimators: usize,
    pub gb_max_depth: usize,
    pub gb_learning_rate: f64,
    pub mlp_hidden: usize,
    pub mlp_lr: f64,
    pub mlp_epochs: usize,
    pub mlp_optimizer: MlpOptimizer,
    pub seed: u64,
    /// Decision threshold stored with the trained detector.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: DetectorKind::Gb,
            lr_iterations: 2000,
            lr_l2: 1.0,
            gb_estimators: 200,
            gb_max_depth: 10,
            gb_learning_rate: 0.1,
            mlp_hidden: 128,
            mlp_lr: 0.01,
            mlp_epochs: 2000,
            mlp_optimizer: MlpOptimizer::Sgd,
            seed: 0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn with_kind(kind: DetectorKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::InvalidConfig(m.to_owned()));
        match self.kind {
            DetectorKind::Lr => {
                if self.lr_iterations == 0 {
                    return bad("lr_iterations must be positive");
                }
                if !(self.lr_l2 >= 0.0 && self.lr_l2.is_finite()) {
                    return bad("lr_l2 must be a nonnegative number");
                }
            }
            DetectorKind::Gb => {
                if self.gb_estimators == 0 || self.gb_max_depth == 0 {
                    return bad("gb_estimators and gb_max_depth must be positive");
                }
                if !(self.gb_learning_rate > 0.0 && self.gb_learning_rate.is_finite()) {
                    return bad("gb_learning_rate must be positive");
                }
            }
            DetectorKind::Mlp => {
                if self.mlp_hidden == 0 || self.mlp_epochs == 0 {
                    return bad("mlp_hidden and mlp_epochs must be positive");
                }
                if !(self.mlp_lr > 0.0 && self.mlp_lr.is_finite()) {
                    return bad("mlp_lr must be positive");
                }
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0,1)");
        }
        Ok(())
    }

    /// Short description of the hyperparameters relevant to `kind`.
    pub fn describe(&self) -> String {
        match self.kind {
            DetectorKind::Lr => format!(
                "lr iterations={} l2={} seed={}",
                self.lr_iterations, self.lr_l2, self.seed
            ),
            DetectorKind::Gb => format!(
                "gb estimators={} depth={} rate={} seed={}",
                self.gb_estimators, self.gb_max_depth, self.gb_learning_rate, self.seed
            ),
            DetectorKind::Mlp => format!(
                "mlp hidden={} rate={} epochs={} optimizer={} seed={}",
                self.mlp_hidden, self.mlp_lr, self.mlp_epochs, self.mlp_optimizer, self.seed
            ),
        }
    }
}

/// Per-feature z-scoring fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub means: Vec<f64>,
    /// Population standard deviations; constant columns use 1.
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let p = x.first().map_or(0, Vec::len);
        let n = x.len().max(1) as f64;
        let mut means = vec![0.0; p];
        for row in x {
            means.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut vars = vec![0.0; p];
        for row in x {
            for ((v, m), xi) in vars.iter_mut().zip(&means).zip(row) {
                *v += (xi - m).powi(2);
            }
        }
        let stds = vars
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 * (1.0 + s) && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { means, stds }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Logistic(LogisticModel),
    Boosted(GbModel),
    Mlp(MlpModel),
}

/// A trained classifier mapping feature vectors to hallucination probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub feature_names: Vec<String>,
    pub standardizer: Standardizer,
    pub threshold: f64,
    pub model: Model,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Detector {
    pub fn kind(&self) -> DetectorKind {
        match self.model {
            Model::Logistic(_) => DetectorKind::Lr,
            Model::Boosted(_) => DetectorKind::Gb,
            Model::Mlp(_) => DetectorKind::Mlp,
        }
    }

    pub fn num_features(&self) -> usize {
        self.standardizer.dim()
    }

    /// Raw model score before clamping and the sigmoid.
    pub fn decision_function(&self, x: &[f64]) -> Result<f64, DetectorError> {
        if x.len() != self.num_features() {
            return Err(DetectorError::DimensionMismatch {
                expected: self.num_features(),
                got: x.len(),
            });
        }
        Ok(match &self.model {
            Model::Logistic(m) => m.logit(&self.standardizer.transform(x)),
            Model::Boosted(m) => m.logit(x),
            Model::Mlp(m) => m.logit(&self.standardizer.transform(x)),
        })
    }

    /// Hallucination probability, strictly inside (0,1).
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, DetectorError> {
        let z = self.decision_function(x)?;
        let z = if z.is_nan() { 0.0 } else { z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP) };
        Ok(sigmoid(z))
    }

    pub fn predict_features(&self, fv: &FeatureVector) -> Result<f64, DetectorError> {
        self.predict_proba(&fv.to_vec())
    }

    pub fn predict_all(&self, x: &[Vec<f64>]) -> Result<Vec<f64>, DetectorError> {
        x.iter().map(|row| self.predict_proba(row)).collect()
    }
}

/// Validated training matrix.
pub(crate) struct TrainingSet {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<bool>,
}

pub(crate) fn training_set(x: Vec<Vec<f64>>, y: Vec<bool>) -> Result<TrainingSet, DetectorError> {
    if x.len() < 2 {
        return Err(DetectorError::TooFewExamples(x.len()));
    }
    let p = x[0].len();
    if x.iter().any(|r| r.len() != p) || y.len() != x.len() {
        return Err(DetectorError::RaggedFeatures);
    }
    if let Some(i) = x.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(DetectorError::NonFiniteFeature(i));
    }
    let positives = y.iter().filter(|&&b| b).count();
    if positives == 0 || positives == y.len() {
        return Err(DetectorError::SingleClass);
    }
    Ok(TrainingSet { x, y })
}

/// Trains on a raw matrix; `feature_names` may be empty.
pub fn train_matrix(
    x: Vec<Vec<f64>>,
    y: Vec<bool>,
    feature_names: Vec<String>,
    config: &TrainConfig,
) -> Result<Detector, DetectorError> {
    config.validate()?;
    let data = training_set(x, y)?;
    let standardizer = Standardizer::fit(&data.x);
    let model = match config.kind {
        DetectorKind::Lr => {
            let z: Vec<Vec<f64>> = data.x.iter().map(|r| standardizer.transform(r)).collect();
            Model::Logistic(logistic::fit(&z, &data.y, config))
        }
        DetectorKind::Gb => Model::Boosted(gbdt::fit(&data.x, &data.y, config).0),
        DetectorKind::Mlp => {
            let z: Vec<Vec<f64>> = data.x.iter().map(|r| standardizer.transform(r)).collect();
            Model::Mlp(mlp::fit(&z, &data.y, config))
        }
    };
    Ok(Detector {
        feature_names,
        standardizer,
        threshold: config.threshold,
        model,
    })
}

pub fn train(examples: &[LabeledExample], config: &TrainConfig) -> Result<Detector, DetectorError> {
    let names = examples
        .first()
        .map(|e| e.features.feature_names.clone())
        .unwrap_or_default();
    let (x, y) = crate::dataset::design_matrix(examples);
    train_matrix(x, y, names, config)
}

/// Trains gradient boosting and also returns the training log loss after
/// the initial score and after every added tree.
pub fn train_gb_with_history(
    x: Vec<Vec<f64>>,
    y: Vec<bool>,
    config: &TrainConfig,
) -> Result<(Detector, Vec<f64>), DetectorError> {
    let config = TrainConfig {
        kind: DetectorKind::Gb,
        ..config.clone()
    };
    config.validate()?;
    let data = training_set(x, y)?;
    let standardizer = Standardizer::fit(&data.x);
    let (model, history) = gbdt::fit(&data.x, &data.y, &config);
    Ok((
        Detector {
            feature_names: Vec::new(),
            standardizer,
            threshold: config.threshold,
            model: Model::Boosted(model),
        },
        history,
    ))
}
