//! Per-token features: layer entropy, the Overthinking Score, and the
//! next-token image/text attention aggregates, assembled into one vector
//! `[s_ot | entropy_1..L | img_attn_1..L | txt_attn_1..L]`.

use std::collections::HashSet;

use thiserror::Error;

use crate::logitlens::{self, LayerDistribution, LensError};
use crate::trace::{Layers, ModelHead, SampleTrace};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("sample {sample}: {which} index set is empty")]
    EmptyIndexSet { sample: String, which: &'static str },
    #[error("at least one layer is required")]
    NoLayers,
    #[error("{0} top-1 tokens but {1} entropies")]
    LengthMismatch(usize, usize),
    #[error("layer {layer} outside [1, {num_layers}]")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("operation needs a raw-tier sample")]
    NotRawTier,
    #[error("raw-tier sample needs the model head")]
    MissingHead,
    #[error("feature vector carries no top-1 tokens; cannot recompute the overthinking score")]
    MissingTopTokens,
    #[error("logit lens: {0}")]
    Lens(Box<LensError>),
}

impl From<LensError> for FeatureError {
    fn from(e: LensError) -> Self {
        FeatureError::Lens(Box::new(e))
    }
}

/// Entropy in nats with `0 · ln 0 = 0`.
pub fn entropy(dist: &LayerDistribution) -> f64 {
    -dist
        .probabilities
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Fraction of distinct top-1 tokens times the mean layer entropy.
pub fn overthinking_score(top1_per_layer: &[u32], entropies: &[f64]) -> Result<f64, FeatureError> {
    let l = top1_per_layer.len();
    if l == 0 {
        return Err(FeatureError::NoLayers);
    }
    if entropies.len() != l {
        return Err(FeatureError::LengthMismatch(l, entropies.len()));
    }
    let unique = top1_per_layer.iter().collect::<HashSet<_>>().len();
    let n = l as f64;
    Ok((unique as f64 / n) * (entropies.iter().sum::<f64>() / n))
}

/// Denominator used by the text-attention aggregate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextNorm {
    /// Divide by the full text-index count, even though the target itself is
    /// excluded from the sum.
    #[default]
    AllText,
    /// Divide by the number of text positions actually summed.
    ExcludeSelf,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FeatureOptions {
    pub text_norm: TextNorm,
}

fn raw_rows(sample: &SampleTrace, layer: usize) -> Result<&[Vec<f32>], FeatureError> {
    let Layers::Raw(layers) = &sample.layers else {
        return Err(FeatureError::NotRawTier);
    };
    let num_layers = layers.len();
    if layer == 0 || layer > num_layers {
        return Err(FeatureError::LayerOutOfRange { layer, num_layers });
    }
    Ok(&layers[layer - 1].attention_rows)
}

/// Sum over `positions` of the per-position maximum across heads.
fn max_head_sum(rows: &[Vec<f32>], positions: impl Iterator<Item = usize>) -> f64 {
    positions
        .map(|i| {
            rows.iter()
                .map(|row| row.get(i).map_or(0.0, |&a| f64::from(a)))
                .fold(0.0, f64::max)
        })
        .sum()
}

/// Mean over image positions of the max-over-heads attention from the target.
pub fn image_attention(sample: &SampleTrace, layer: usize) -> Result<f64, FeatureError> {
    let rows = raw_rows(sample, layer)?;
    if sample.image_indices.is_empty() {
        return Err(FeatureError::EmptyIndexSet {
            sample: sample.sample_id.clone(),
            which: "image",
        });
    }
    let total = max_head_sum(rows, sample.image_indices.iter().map(|&i| i as usize));
    Ok(total / sample.image_indices.len() as f64)
}

pub fn text_attention(sample: &SampleTrace, layer: usize) -> Result<f64, FeatureError> {
    text_attention_with(sample, layer, TextNorm::default())
}

/// Max-over-heads attention summed over text positions other than the
/// target, divided according to `norm`.
pub fn text_attention_with(sample: &SampleTrace, layer: usize, norm: TextNorm) -> Result<f64, FeatureError> {
    let rows = raw_rows(sample, layer)?;
    let t = sample.target_position;
    let summed: Vec<usize> = sample
        .text_indices
        .iter()
        .map(|&i| i as usize)
        .filter(|&i| i != t)
        .collect();
    if summed.is_empty() {
        return Err(FeatureError::EmptyIndexSet {
            sample: sample.sample_id.clone(),
            which: "text",
        });
    }
    let denom = match norm {
        TextNorm::AllText => sample.text_indices.len(),
        TextNorm::ExcludeSelf => summed.len(),
    };
    Ok(max_head_sum(rows, summed.into_iter()) / denom as f64)
}

/// Flattened feature representation of one predicted token.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub s_ot: f64,
    pub entropies: Vec<f64>,
    pub img_attn: Vec<f64>,
    pub txt_attn: Vec<f64>,
    /// 1-based source layer of each per-layer entry.
    pub layers: Vec<usize>,
    /// Top-1 token per layer; empty when reloaded from a feature table.
    pub top1_tokens: Vec<u32>,
    pub feature_names: Vec<String>,
}

impl FeatureVector {
    pub fn new(
        s_ot: f64,
        entropies: Vec<f64>,
        img_attn: Vec<f64>,
        txt_attn: Vec<f64>,
        layers: Vec<usize>,
        top1_tokens: Vec<u32>,
    ) -> Self {
        let feature_names = feature_names(&layers);
        Self {
            s_ot,
            entropies,
            img_attn,
            txt_attn,
            layers,
            top1_tokens,
            feature_names,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self) -> usize {
        1 + self.entropies.len() + self.img_attn.len() + self.txt_attn.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.push(self.s_ot);
        out.extend_from_slice(&self.entropies);
        out.extend_from_slice(&self.img_attn);
        out.extend_from_slice(&self.txt_attn);
        out
    }

    /// Rebuilds a vector from its flattened values and column names.
    pub fn from_flat(names: &[String], values: &[f64]) -> Result<Self, String> {
        if names.len() != values.len() {
            return Err(format!("{} names for {} values", names.len(), values.len()));
        }
        if names.len() < 4 || !(names.len() - 1).is_multiple_of(3) {
            return Err(format!("{} columns is not 3L+1", names.len()));
        }
        let l = (names.len() - 1) / 3;
        let parse_layer = |name: &str, prefix: &str| -> Result<usize, String> {
            name.strip_prefix(prefix)
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&v| v >= 1)
                .ok_or_else(|| format!("expected column {prefix}<layer>, got {name:?}"))
        };
        if names[0] != "s_ot" {
            return Err(format!("first feature must be s_ot, got {:?}", names[0]));
        }
        let mut layers = Vec::with_capacity(l);
        for name in &names[1..=l] {
            layers.push(parse_layer(name, "entropy_")?);
        }
        for (i, name) in names[1 + l..1 + 2 * l].iter().enumerate() {
            if parse_layer(name, "img_attn_")? != layers[i] {
                return Err(format!("column {name:?} out of layer order"));
            }
        }
        for (i, name) in names[1 + 2 * l..].iter().enumerate() {
            if parse_layer(name, "txt_attn_")? != layers[i] {
                return Err(format!("column {name:?} out of layer order"));
            }
        }
        Ok(Self::new(
            values[0],
            values[1..=l].to_vec(),
            values[1 + l..1 + 2 * l].to_vec(),
            values[1 + 2 * l..].to_vec(),
            layers,
            Vec::new(),
        ))
    }
}

pub fn feature_names(layers: &[usize]) -> Vec<String> {
    let mut names = vec!["s_ot".to_owned()];
    for prefix in ["entropy_", "img_attn_", "txt_attn_"] {
        names.extend(layers.iter().map(|l| format!("{prefix}{l}")));
    }
    names
}

pub fn extract_features(sample: &SampleTrace, head: Option<&ModelHead>) -> Result<FeatureVector, FeatureError> {
    extract_features_with(sample, head, FeatureOptions::default())
}

pub fn extract_features_with(
    sample: &SampleTrace,
    head: Option<&ModelHead>,
    opts: FeatureOptions,
) -> Result<FeatureVector, FeatureError> {
    let empty = |which| FeatureError::EmptyIndexSet {
        sample: sample.sample_id.clone(),
        which,
    };
    if sample.image_indices.is_empty() {
        return Err(empty("image"));
    }
    if !sample
        .text_indices
        .iter()
        .any(|&i| i as usize != sample.target_position)
    {
        return Err(empty("text"));
    }
    let l = sample.layers.len();
    if l == 0 {
        return Err(FeatureError::NoLayers);
    }
    let mut entropies = Vec::with_capacity(l);
    let mut img = Vec::with_capacity(l);
    let mut txt = Vec::with_capacity(l);
    let mut top1 = Vec::with_capacity(l);
    match &sample.layers {
        Layers::Raw(layers) => {
            let head = head.ok_or(FeatureError::MissingHead)?;
            for (i, layer) in layers.iter().enumerate() {
                let dist = logitlens::project_to_vocab(&layer.hidden_state, head, i + 1)?;
                entropies.push(entropy(&dist));
                top1.push(logitlens::top1_token(&dist));
                img.push(image_attention(sample, i + 1)?);
                txt.push(text_attention_with(sample, i + 1, opts.text_norm)?);
            }
        }
        Layers::Decoded(layers) => {
            for layer in layers {
                entropies.push(f64::from(layer.entropy));
                top1.push(layer.top1().ok_or(FeatureError::NoLayers)?);
                img.push(f64::from(layer.img_attn));
                txt.push(f64::from(layer.txt_attn));
            }
        }
    }
    let s_ot = overthinking_score(&top1, &entropies)?;
    Ok(FeatureVector::new(s_ot, entropies, img, txt, (1..=l).collect(), top1))
}

/// Restricts a feature vector to a subset of its layers, recomputing the
/// Overthinking Score over the retained layers only.
pub fn select_layers(fv: &FeatureVector, subset: &[usize]) -> Result<FeatureVector, FeatureError> {
    if subset.is_empty() {
        return Err(FeatureError::NoLayers);
    }
    if fv.top1_tokens.len() != fv.layers.len() {
        return Err(FeatureError::MissingTopTokens);
    }
    let wanted: HashSet<usize> = subset.iter().copied().collect();
    let max_layer = fv.layers.iter().copied().max().unwrap_or(0);
    if let Some(&bad) = subset.iter().find(|l| !fv.layers.contains(l)) {
        return Err(FeatureError::LayerOutOfRange {
            layer: bad,
            num_layers: max_layer,
        });
    }
    let keep: Vec<usize> = (0..fv.layers.len())
        .filter(|&i| wanted.contains(&fv.layers[i]))
        .collect();
    let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let entropies = pick(&fv.entropies);
    let top1: Vec<u32> = keep.iter().map(|&i| fv.top1_tokens[i]).collect();
    let s_ot = overthinking_score(&top1, &entropies)?;
    Ok(FeatureVector::new(
        s_ot,
        entropies,
        pick(&fv.img_attn),
        pick(&fv.txt_attn),
        keep.iter().map(|&i| fv.layers[i]).collect(),
        top1,
    ))
}
