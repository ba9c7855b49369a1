//! Diagnostic analyses over decoded trajectories: semantic alignment between
//! intermediate and final top-1 tokens, confounder propagation, strong
//! scene-prior filtering, and per-layer entropy correlations. The synthetic
//! trace generator lives in [`synth`].

pub mod synth;

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::dataset::LabeledExample;
use crate::logitlens::{self, LensError};
use crate::trace::{cosine, EmbeddingTable, Labels, Layers, ModelHead, SampleTrace, Trace};

pub use synth::{bayes_optimal_auc, generate_synthetic, synthetic_vocab, ClassProfile, LogitNormal, SynthConfig, SynthError};

const SCENE_LABELS_TEXT: &str = include_str!("../../assets/scene_labels.txt");

/// Default similarity threshold for strong scene priors.
pub const SCENE_PRIOR_THRESHOLD: f64 = 0.6;
/// Default S_align threshold for counting a propagated confounder.
pub const PROPAGATION_THRESHOLD: f64 = 0.5;

/// The 21 candidate scene labels, in their canonical order.
pub fn scene_labels() -> Vec<&'static str> {
    SCENE_LABELS_TEXT.lines().filter(|l| !l.is_empty()).collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("sample {sample}: no embedding for {token:?}")]
    MissingEmbedding { sample: String, token: String },
    #[error("sample {sample}: token id {id} has no string in the vocabulary")]
    UnknownToken { sample: String, id: u32 },
    #[error("sample {0}: no description")]
    MissingDescription(String),
    #[error("no hallucinated samples")]
    NoHallucinated,
    #[error("correlation needs both classes present")]
    SingleClass,
    #[error("sample {0} has no layers")]
    NoLayers(String),
    #[error("samples have different layer counts")]
    RaggedLayers,
    #[error("embedding tables differ in dimension ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("sample {sample}: {source}")]
    Lens {
        sample: String,
        #[source]
        source: LensError,
    },
}

/// Top-1 token per layer; raw-tier samples go through the logit lens.
pub fn top1_sequence(sample: &SampleTrace, head: &ModelHead) -> Result<Vec<u32>, AnalysisError> {
    let lens_err = |source| AnalysisError::Lens {
        sample: sample.sample_id.clone(),
        source,
    };
    match &sample.layers {
        Layers::Decoded(layers) => layers
            .iter()
            .map(|l| l.top1().ok_or_else(|| AnalysisError::NoLayers(sample.sample_id.clone())))
            .collect(),
        Layers::Raw(layers) => layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                logitlens::project_to_vocab(&l.hidden_state, head, i + 1)
                    .map(|d| logitlens::top1_token(&d))
                    .map_err(lens_err)
            })
            .collect(),
    }
}

/// Reads a vocabulary file: a JSON array of strings indexed by token id.
pub fn parse_vocab(text: &str) -> Result<Vec<String>, String> {
    serde_json::from_str::<Vec<String>>(text).map_err(|e| format!("vocabulary: {e}"))
}

/// Reads `sample_id<TAB>description` lines; blank lines are skipped.
pub fn parse_descriptions(text: &str) -> Result<HashMap<String, String>, String> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let (id, description) = line
            .split_once('\t')
            .ok_or_else(|| format!("descriptions line {}: expected id<TAB>text", i + 1))?;
        if id.is_empty() {
            return Err(format!("descriptions line {}: empty sample id", i + 1));
        }
        if out.insert(id.to_owned(), description.to_owned()).is_some() {
            return Err(format!("descriptions line {}: duplicate sample id {id:?}", i + 1));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub sample_id: String,
    /// Maximum cosine over differing intermediate tokens, starting from 0.
    pub s_align: f64,
    /// One entry per layer before the last; `None` where the token equals the
    /// final one or has no embedding.
    pub per_layer_similarity: Vec<Option<f64>>,
}

/// Maximum semantic alignment between the final-layer top-1 token and the
/// top-1 tokens of earlier layers that differ from it by id.
///
/// `tokens` holds the per-layer top-1 ids and `vocab` maps ids to strings.
pub fn semantic_alignment_of(
    sample_id: &str,
    tokens: &[u32],
    table: &EmbeddingTable,
    vocab: &[String],
) -> Result<AlignmentResult, AnalysisError> {
    let (&last, earlier) = tokens
        .split_last()
        .ok_or_else(|| AnalysisError::NoLayers(sample_id.to_owned()))?;
    let name = |id: u32| {
        vocab.get(id as usize).ok_or(AnalysisError::UnknownToken {
            sample: sample_id.to_owned(),
            id,
        })
    };
    let final_name = name(last)?;
    let final_emb = table.get(final_name).ok_or_else(|| AnalysisError::MissingEmbedding {
        sample: sample_id.to_owned(),
        token: final_name.clone(),
    })?;
    let mut s_align = 0.0;
    let mut per_layer = Vec::with_capacity(earlier.len());
    for &id in earlier {
        if id == last {
            per_layer.push(None);
            continue;
        }
        let sim = vocab
            .get(id as usize)
            .and_then(|s| table.get(s))
            .map(|emb| cosine(final_emb, emb));
        if let Some(s) = sim {
            if s > s_align {
                s_align = s;
            }
        }
        per_layer.push(sim);
    }
    Ok(AlignmentResult {
        sample_id: sample_id.to_owned(),
        s_align,
        per_layer_similarity: per_layer,
    })
}

pub fn semantic_alignment(
    sample: &SampleTrace,
    head: &ModelHead,
    table: &EmbeddingTable,
    vocab: &[String],
) -> Result<AlignmentResult, AnalysisError> {
    let tokens = top1_sequence(sample, head)?;
    semantic_alignment_of(&sample.sample_id, &tokens, table, vocab)
}

/// Alignment of one labeled sample together with its unique top-1 count.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSample {
    pub label: bool,
    pub unique_tokens: usize,
    pub alignment: AlignmentResult,
}

/// Aligns every labeled sample of `trace`; unlabeled samples are skipped.
pub fn align_labeled(
    trace: &Trace,
    labels: &Labels,
    table: &EmbeddingTable,
    vocab: &[String],
) -> Result<Vec<AlignedSample>, AnalysisError> {
    let mut out = Vec::new();
    for sample in &trace.samples {
        let Some(label) = labels.get(&sample.sample_id) else {
            continue;
        };
        let tokens = top1_sequence(sample, &trace.head)?;
        let mut distinct = tokens.clone();
        distinct.sort_unstable();
        distinct.dedup();
        out.push(AlignedSample {
            label,
            unique_tokens: distinct.len(),
            alignment: semantic_alignment_of(&sample.sample_id, &tokens, table, vocab)?,
        });
    }
    Ok(out)
}

/// Fraction of hallucinated samples whose S_align reaches `threshold`.
pub fn propagation_rate(aligned: &[AlignedSample], threshold: f64) -> Result<f64, AnalysisError> {
    let hallu: Vec<&AlignedSample> = aligned.iter().filter(|a| a.label).collect();
    if hallu.is_empty() {
        return Err(AnalysisError::NoHallucinated);
    }
    let hits = hallu.iter().filter(|a| a.alignment.s_align >= threshold).count();
    Ok(hits as f64 / hallu.len() as f64)
}

pub fn confounder_propagation_rate(
    trace: &Trace,
    labels: &Labels,
    table: &EmbeddingTable,
    vocab: &[String],
    threshold: f64,
) -> Result<f64, AnalysisError> {
    propagation_rate(&align_labeled(trace, labels, table, vocab)?, threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniqueBucket {
    pub unique_tokens: usize,
    pub hallucinated: usize,
    pub rate: f64,
}

/// Propagation rate per unique-top-1-count bucket, ascending; buckets
/// without hallucinated samples are omitted.
pub fn unique_tokens_vs_propagation(aligned: &[AlignedSample], threshold: f64) -> Vec<UniqueBucket> {
    let mut buckets: BTreeMap<usize, Vec<AlignedSample>> = BTreeMap::new();
    for a in aligned {
        buckets.entry(a.unique_tokens).or_default().push(a.clone());
    }
    buckets
        .into_iter()
        .filter_map(|(unique_tokens, members)| {
            let rate = propagation_rate(&members, threshold).ok()?;
            Some(UniqueBucket {
                unique_tokens,
                hallucinated: members.iter().filter(|a| a.label).count(),
                rate,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneMatch {
    pub sample_id: String,
    pub scene: &'static str,
    pub similarity: f64,
}

/// Infers each sample's scene as the label closest to its description
/// embedding and keeps samples whose generated token is closer than
/// `threshold` (strictly) to that scene.
///
/// `scene_table` holds the scene label and description embeddings,
/// `token_table` the token embeddings; they may be the same table.
pub fn scene_prior_filter<'a>(
    samples: impl IntoIterator<Item = &'a SampleTrace>,
    descriptions: &HashMap<String, String>,
    scene_table: &EmbeddingTable,
    token_table: &EmbeddingTable,
    threshold: f64,
) -> Result<Vec<SceneMatch>, AnalysisError> {
    if scene_table.dim() != token_table.dim() {
        return Err(AnalysisError::DimensionMismatch(scene_table.dim(), token_table.dim()));
    }
    let missing = |sample: &str, token: &str| AnalysisError::MissingEmbedding {
        sample: sample.to_owned(),
        token: token.to_owned(),
    };
    let labels = scene_labels();
    let mut out = Vec::new();
    for sample in samples {
        let id = &sample.sample_id;
        let description = descriptions
            .get(id)
            .ok_or_else(|| AnalysisError::MissingDescription(id.clone()))?;
        let desc_emb = scene_table.get(description).ok_or_else(|| missing(id, description))?;
        let mut scene: Option<(&'static str, &[f32], f64)> = None;
        for &label in &labels {
            let emb = scene_table.get(label).ok_or_else(|| missing(id, label))?;
            let c = cosine(desc_emb, emb);
            if scene.is_none_or(|(_, _, best)| c > best) {
                scene = Some((label, emb, c));
            }
        }
        let (label, scene_emb, _) = scene.expect("21 scene labels");
        let token = &sample.final_token_string;
        let token_emb = token_table.get(token).ok_or_else(|| missing(id, token))?;
        let similarity = cosine(scene_emb, token_emb);
        if similarity > threshold {
            out.push(SceneMatch {
                sample_id: id.clone(),
                scene: label,
                similarity,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCorrelation {
    /// 1-based layer.
    pub layer: usize,
    pub coefficient: f64,
    /// Set when the layer's entropy has zero variance; the coefficient is 0.
    pub degenerate: bool,
}

/// Point-biserial correlation between each layer's entropy and the label.
pub fn entropy_hallucination_correlation(examples: &[LabeledExample]) -> Result<Vec<LayerCorrelation>, AnalysisError> {
    let positives = examples.iter().filter(|e| e.label).count();
    if positives == 0 || positives == examples.len() {
        return Err(AnalysisError::SingleClass);
    }
    let layers = &examples[0].features.layers;
    if examples.iter().any(|e| e.features.layers != *layers) {
        return Err(AnalysisError::RaggedLayers);
    }
    let n = examples.len() as f64;
    let y: Vec<f64> = examples.iter().map(|e| if e.label { 1.0 } else { 0.0 }).collect();
    let y_mean = y.iter().sum::<f64>() / n;
    let y_ss: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();
    Ok(layers
        .iter()
        .enumerate()
        .map(|(k, &layer)| {
            let h: Vec<f64> = examples.iter().map(|e| e.features.entropies[k]).collect();
            let h_mean = h.iter().sum::<f64>() / n;
            let h_ss: f64 = h.iter().map(|v| (v - h_mean).powi(2)).sum();
            if h_ss <= 0.0 || !h_ss.is_finite() {
                return LayerCorrelation {
                    layer,
                    coefficient: 0.0,
                    degenerate: true,
                };
            }
            let cov: f64 = h.iter().zip(&y).map(|(a, b)| (a - h_mean) * (b - y_mean)).sum();
            LayerCorrelation {
                layer,
                coefficient: (cov / (h_ss * y_ss).sqrt()).clamp(-1.0, 1.0),
                degenerate: false,
            }
        })
        .collect())
}
