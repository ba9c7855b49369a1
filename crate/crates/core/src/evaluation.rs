//! Stratified splitting, detection metrics, and the feature and layer
//! ablation studies.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::LabeledExample;
use crate::detectors::{train_matrix, Detector, DetectorError, TrainConfig};
use crate::features::{select_layers, FeatureError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("split: {0}")]
    Split(String),
    #[error("metric needs both classes present")]
    SingleClass,
    #[error("average precision needs at least one positive")]
    NoPositives,
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("ablation: {0}")]
    Ablation(String),
    #[error("sample {sample}: {source}")]
    Feature {
        sample: String,
        #[source]
        source: FeatureError,
    },
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

/// Indices of a stratified split: `round(fraction * n_class)` members of each
/// class, clamped to `[1, n_class - 1]`, go to the held-out side. Both index
/// lists are ascending.
pub fn stratified_indices(labels: &[bool], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), String> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(format!("fraction {fraction} outside (0,1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut held = Vec::new();
    for class in [false, true] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let n = members.len();
        if n < 2 {
            return Err(format!(
                "class {} has {n} member(s), need at least 2",
                u8::from(class)
            ));
        }
        let take = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        members.shuffle(&mut rng);
        held.extend_from_slice(&members[..take]);
        train.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    Ok((train, held))
}

/// Stratified `(train, test)` split; deterministic under `seed`.
pub fn split_dataset(
    examples: &[LabeledExample],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>), EvalError> {
    let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
    let (train, test) = stratified_indices(&labels, test_fraction, seed).map_err(EvalError::Split)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| examples[i].clone()).collect();
    Ok((pick(train), pick(test)))
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    match scores.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(EvalError::NonFiniteScore(i)),
        None => Ok(()),
    }
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties credited 1/2.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Non-interpolated average precision: mean of precision at the rank of
/// each positive, scores descending, ties in input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

/// F1 of the positive class predicting `score >= threshold`; 0 when there
/// are no predicted or no actual positives.
pub fn f1_score(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    if tp + fp == 0 || tp + fne == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fne) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub ap: f64,
    pub f1: f64,
    pub threshold_used: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl EvalReport {
    pub fn from_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Self, EvalError> {
        let n_pos = labels.iter().filter(|&&l| l).count();
        Ok(Self {
            auc: roc_auc(scores, labels)?,
            ap: average_precision(scores, labels)?,
            f1: f1_score(scores, labels, threshold),
            threshold_used: threshold,
            n_pos,
            n_neg: labels.len() - n_pos,
        })
    }

    pub fn csv_header() -> &'static str {
        "auc_pct,ap_pct,f1_pct,threshold,n_pos,n_neg"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.2},{:.2},{:.2},{},{},{}",
            self.auc * 100.0,
            self.ap * 100.0,
            self.f1 * 100.0,
            self.threshold_used,
            self.n_pos,
            self.n_neg
        )
    }

    pub fn to_text(&self) -> String {
        format!(
            "AUC {:.2}  AP {:.2}  F1 {:.2}  (threshold {}, {} positive / {} negative)",
            self.auc * 100.0,
            self.ap * 100.0,
            self.f1 * 100.0,
            self.threshold_used,
            self.n_pos,
            self.n_neg
        )
    }
}

/// Scores `examples` with `detector` at its stored threshold.
pub fn evaluate(detector: &Detector, examples: &[LabeledExample]) -> Result<EvalReport, EvalError> {
    let (x, y) = crate::dataset::design_matrix(examples);
    let scores = detector.predict_all(&x)?;
    EvalReport::from_scores(&scores, &y, detector.threshold)
}

/// Trains on `train` and evaluates on `test`.
fn fit_and_score(
    train: &[(Vec<f64>, bool)],
    test: &[(Vec<f64>, bool)],
    config: &TrainConfig,
) -> Result<EvalReport, EvalError> {
    let (x, y): (Vec<_>, Vec<_>) = train.iter().cloned().unzip();
    let d = train_matrix(x, y, Vec::new(), config)?;
    let (tx, ty): (Vec<_>, Vec<_>) = test.iter().cloned().unzip();
    EvalReport::from_scores(&d.predict_all(&tx)?, &ty, config.threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureGroup {
    OverthinkingScore,
    Entropy,
    ImageAttention,
    TextAttention,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 4] = [
        FeatureGroup::OverthinkingScore,
        FeatureGroup::Entropy,
        FeatureGroup::ImageAttention,
        FeatureGroup::TextAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureGroup::OverthinkingScore => "s_ot",
            FeatureGroup::Entropy => "entropy",
            FeatureGroup::ImageAttention => "img_attn",
            FeatureGroup::TextAttention => "txt_attn",
        }
    }
}

impl std::str::FromStr for FeatureGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeatureGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| format!("unknown feature group {s:?} (s_ot, entropy, img_attn, txt_attn)"))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// The four groups as scalars: S_OT and the layer means of the other three.
pub fn group_means(e: &LabeledExample) -> [f64; 4] {
    let f = &e.features;
    [f.s_ot, mean(&f.entropies), mean(&f.img_attn), mean(&f.txt_attn)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// Omitted groups joined by `+`, `none` for the baseline, or the layer
    /// subset label.
    pub label: String,
    pub report: EvalReport,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("setting,{}\n", EvalReport::csv_header());
    for row in rows {
        let _ = writeln!(out, "{},{}", row.label, row.report.csv_row());
    }
    out
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
    let mut out = format!("{:width$}  {:>6}  {:>6}  {:>6}\n", "setting", "AUC", "AP", "F1");
    for row in rows {
        let r = &row.report;
        let _ = writeln!(
            out,
            "{:width$}  {:>6.2}  {:>6.2}  {:>6.2}",
            row.label,
            r.auc * 100.0,
            r.ap * 100.0,
            r.f1 * 100.0
        );
    }
    out
}

/// Retrains on the averaged four-group representation with each entry of
/// `omissions` removed. An empty omission set is the full baseline.
pub fn feature_ablation(
    examples: &[LabeledExample],
    config: &TrainConfig,
    omissions: &[Vec<FeatureGroup>],
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<AblationRow>, EvalError> {
    for set in omissions {
        if FeatureGroup::ALL.iter().all(|g| set.contains(g)) {
            return Err(EvalError::Ablation("cannot omit every feature group".into()));
        }
    }
    let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
    let (train_idx, test_idx) = stratified_indices(&labels, test_fraction, seed).map_err(EvalError::Split)?;
    let grouped: Vec<[f64; 4]> = examples.iter().map(group_means).collect();
    omissions
        .par_iter()
        .map(|set| {
            let keep: Vec<usize> = (0..4).filter(|&g| !set.contains(&FeatureGroup::ALL[g])).collect();
            let rows = |idx: &[usize]| -> Vec<(Vec<f64>, bool)> {
                idx.iter()
                    .map(|&i| (keep.iter().map(|&g| grouped[i][g]).collect(), labels[i]))
                    .collect()
            };
            let report = fit_and_score(&rows(&train_idx), &rows(&test_idx), config)?;
            let label = if set.is_empty() {
                "none".to_owned()
            } else {
                set.iter().map(|g| g.name()).collect::<Vec<_>>().join("+")
            };
            Ok(AblationRow { label, report })
        })
        .collect()
}

/// A named set of 1-based layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSubset {
    pub name: String,
    pub layers: Vec<usize>,
}

impl LayerSubset {
    pub fn range(first: usize, last: usize) -> Self {
        Self {
            name: if first == last {
                format!("[{first}]")
            } else {
                format!("[{first}-{last}]")
            },
            layers: (first..=last).collect(),
        }
    }
}

impl std::str::FromStr for LayerSubset {
    type Err = String;

    /// Parses `a-b` or a single layer `a`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v >= 1)
                .ok_or_else(|| format!("bad layer {t:?}"))
        };
        match s.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b {
                    return Err(format!("empty layer range {s:?}"));
                }
                Ok(LayerSubset::range(a, b))
            }
            None => {
                let a = parse(s)?;
                Ok(LayerSubset::range(a, a))
            }
        }
    }
}

/// Retrains on each layer subset, S_OT recomputed over the subset.
pub fn layer_ablation(
    examples: &[LabeledExample],
    config: &TrainConfig,
    subsets: &[LayerSubset],
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<AblationRow>, EvalError> {
    let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
    let (train_idx, test_idx) = stratified_indices(&labels, test_fraction, seed).map_err(EvalError::Split)?;
    subsets
        .par_iter()
        .map(|subset| {
            let reduced = examples
                .iter()
                .map(|e| {
                    select_layers(&e.features, &subset.layers)
                        .map(|fv| (fv.to_vec(), e.label))
                        .map_err(|source| EvalError::Feature {
                            sample: e.sample_id.clone(),
                            source,
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let pick = |idx: &[usize]| idx.iter().map(|&i| reduced[i].clone()).collect::<Vec<_>>();
            let report = fit_and_score(&pick(&train_idx), &pick(&test_idx), config)?;
            Ok(AblationRow {
                label: subset.name.clone(),
                report,
            })
        })
        .collect()
}
