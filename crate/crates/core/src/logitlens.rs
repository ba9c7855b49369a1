//! Logit-lens projection of intermediate hidden states into vocabulary
//! distributions: `softmax(W · LayerNorm(h))` using the model's final norm.

use thiserror::Error;

use crate::features::{self, FeatureError};
use crate::trace::{DecodedLayer, Layers, ModelHead, SampleTrace, TokenProb};

#[derive(Debug, Error, PartialEq)]
pub enum LensError {
    #[error("cannot normalize an empty vector")]
    EmptyVector,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite hidden state")]
    NonFinite,
    #[error("model head carries no projection matrix")]
    MissingLens,
    #[error("k = {k} outside [1, {vocab}]")]
    KOutOfRange { k: usize, vocab: usize },
    #[error("sample {0} is already decoded")]
    AlreadyDecoded(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Probability distribution over the vocabulary at one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDistribution {
    /// 1-based layer index.
    pub layer: usize,
    pub probabilities: Vec<f64>,
}

impl LayerDistribution {
    pub fn new(layer: usize, probabilities: Vec<f64>) -> Self {
        Self {
            layer,
            probabilities,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.probabilities.len()
    }
}

/// `gain * (h - mean) / sqrt(var + eps) + bias` with population variance.
///
/// A zero denominator (constant input with `eps = 0`) maps to the bias.
pub fn layer_norm(h: &[f64], gain: &[f64], bias: &[f64], epsilon: f64) -> Result<Vec<f64>, LensError> {
    let d = h.len();
    if d == 0 {
        return Err(LensError::EmptyVector);
    }
    if gain.len() != d || bias.len() != d {
        return Err(LensError::LengthMismatch(format!(
            "h has {d} entries, gain {} and bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let n = d as f64;
    let mean = h.iter().sum::<f64>() / n;
    let var = h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + epsilon).sqrt();
    Ok(h
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(&x, (&g, &b))| {
            let centered = x - mean;
            let z = if denom > 0.0 { centered / denom } else { 0.0 };
            g * z + b
        })
        .collect())
}

/// Max-subtracted softmax in f64.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `W · LayerNorm(h)` before the softmax.
pub fn lens_logits(h: &[f32], head: &ModelHead) -> Result<Vec<f64>, LensError> {
    let lens = head.lens().ok_or(LensError::MissingLens)?;
    if h.len() != head.hidden_dim {
        return Err(LensError::LengthMismatch(format!(
            "hidden state has {} entries, head expects {}",
            h.len(),
            head.hidden_dim
        )));
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(LensError::NonFinite);
    }
    let widen = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
    let normed = layer_norm(
        &widen(h),
        &widen(&lens.norm_gain),
        &widen(&lens.norm_bias),
        f64::from(lens.norm_epsilon),
    )?;
    Ok(lens
        .projection
        .chunks_exact(head.hidden_dim)
        .map(|row| row.iter().zip(&normed).map(|(&w, &z)| f64::from(w) * z).sum())
        .collect())
}

pub fn project_to_vocab(h: &[f32], head: &ModelHead, layer: usize) -> Result<LayerDistribution, LensError> {
    Ok(LayerDistribution::new(layer, softmax(&lens_logits(h, head)?)))
}

/// Index of the most probable token, ties toward the lowest id.
pub fn top1_token(dist: &LayerDistribution) -> u32 {
    let mut best = 0usize;
    for (i, &p) in dist.probabilities.iter().enumerate().skip(1) {
        if p > dist.probabilities[best] {
            best = i;
        }
    }
    best as u32
}

/// The `k` most probable tokens, descending, ties toward the lower id.
pub fn topk_tokens(dist: &LayerDistribution, k: usize) -> Result<Vec<(u32, f64)>, LensError> {
    let vocab = dist.vocab_size();
    if k == 0 || k > vocab {
        return Err(LensError::KOutOfRange { k, vocab });
    }
    let p = &dist.probabilities;
    let order = |a: &usize, b: &usize| p[*b].total_cmp(&p[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..vocab).collect();
    if k < vocab {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    Ok(idx.into_iter().map(|i| (i as u32, p[i])).collect())
}

/// Converts a raw-tier sample into the decoded tier.
///
/// The top-k order is decided in f64 before rounding to the stored f32, so
/// entries that round to the same f32 keep their f64 order. Entries whose
/// probability rounds to zero are dropped.
pub fn decode_sample(sample: &SampleTrace, head: &ModelHead, k: usize) -> Result<SampleTrace, LensError> {
    let raw = match &sample.layers {
        Layers::Raw(raw) => raw,
        Layers::Decoded(_) => return Err(LensError::AlreadyDecoded(sample.sample_id.clone())),
    };
    if k == 0 || k > head.vocab_size {
        return Err(LensError::KOutOfRange {
            k,
            vocab: head.vocab_size,
        });
    }
    let mut decoded = Vec::with_capacity(raw.len());
    for (i, layer) in raw.iter().enumerate() {
        let dist = project_to_vocab(&layer.hidden_state, head, i + 1)?;
        let topk: Vec<TokenProb> = topk_tokens(&dist, k)?
            .into_iter()
            .map(|(token_id, p)| TokenProb {
                token_id,
                probability: p as f32,
            })
            .filter(|tp| tp.probability > 0.0)
            .collect();
        decoded.push(DecodedLayer {
            topk,
            entropy: features::entropy(&dist) as f32,
            img_attn: features::image_attention(sample, i + 1)? as f32,
            txt_attn: features::text_attention(sample, i + 1)? as f32,
        });
    }
    Ok(SampleTrace {
        layers: Layers::Decoded(decoded),
        ..sample.clone()
    })
}
