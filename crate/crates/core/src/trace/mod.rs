//! Domain model for recorded next-token prediction events and the binary
//! containers they are stored in.
//!
//! A trace file holds one [`ModelHead`] shared by every sample plus a list of
//! [`SampleTrace`]s. Samples come in two tiers: raw samples carry per-layer
//! hidden states and attention rows (and require the projection head to be
//! interpreted), decoded samples carry pre-computed top-k tokens, entropy and
//! attention aggregates.

mod embedding;
mod format;
mod labels;

pub use embedding::{
    cosine, decode_embedding_table, encode_embedding_table, read_embedding_table,
    write_embedding_table, EmbeddingError, EmbeddingTable, EMBEDDING_MAGIC, EMBEDDING_VERSION,
};
pub use format::{
    decode_trace, encode_trace, read_trace_file, write_trace_file, Trace, TraceError,
    TRACE_MAGIC, TRACE_VERSION,
};
pub use labels::{parse_labels, read_labels, write_labels, LabelError, Labels};

use std::collections::HashSet;

/// Tolerance on the row sums of post-softmax attention rows.
pub const ATTENTION_ROW_TOLERANCE: f64 = 1e-4;
/// Slack allowed on the sum of stored top-k probabilities.
pub const TOPK_SUM_TOLERANCE: f64 = 1e-6;
/// Default top-k depth for decoded-tier exports.
pub const DEFAULT_TOPK: usize = 10;

/// Final-norm parameters and output projection used by the logit lens.
#[derive(Debug, Clone, PartialEq)]
pub struct LensParams {
    /// Row-major `vocab_size x hidden_dim` projection matrix.
    pub projection: Vec<f32>,
    pub norm_gain: Vec<f32>,
    pub norm_bias: Vec<f32>,
    pub norm_epsilon: f32,
}

/// Dimensions and (for raw traces) the vocabulary projection of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHead {
    pub model_id: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    /// Absent for decoded-only traces.
    pub lens: Option<LensParams>,
}

impl ModelHead {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_layers == 0 || self.num_heads == 0 || self.hidden_dim == 0 {
            return Err("num_layers, num_heads and hidden_dim must be positive".into());
        }
        if self.vocab_size < 2 {
            return Err(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if let Some(lens) = &self.lens {
            let expected = self.vocab_size.checked_mul(self.hidden_dim);
            if expected != Some(lens.projection.len()) {
                return Err(format!(
                    "projection has {} entries, expected {}x{}",
                    lens.projection.len(),
                    self.vocab_size,
                    self.hidden_dim
                ));
            }
            if lens.norm_gain.len() != self.hidden_dim || lens.norm_bias.len() != self.hidden_dim
            {
                return Err("norm gain/bias length must equal hidden_dim".into());
            }
            if !(lens.norm_epsilon > 0.0 && lens.norm_epsilon.is_finite()) {
                return Err(format!("norm_epsilon must be positive, got {}", lens.norm_epsilon));
            }
            let all_finite = lens
                .projection
                .iter()
                .chain(&lens.norm_gain)
                .chain(&lens.norm_bias)
                .all(|x| x.is_finite());
            if !all_finite {
                return Err("non-finite value in lens parameters".into());
            }
        }
        Ok(())
    }

    pub fn lens(&self) -> Option<&LensParams> {
        self.lens.as_ref()
    }

    /// Row `token` of the projection matrix.
    pub fn projection_row(&self, token: usize) -> Option<&[f32]> {
        let lens = self.lens.as_ref()?;
        let d = self.hidden_dim;
        lens.projection.get(token * d..(token + 1) * d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Raw,
    Decoded,
}

impl Tier {
    pub fn code(self) -> u8 {
        match self {
            Tier::Raw => 0,
            Tier::Decoded => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Tier::Raw),
            1 => Some(Tier::Decoded),
            _ => None,
        }
    }
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tier::Raw => "raw",
            Tier::Decoded => "decoded",
        })
    }
}

/// Raw per-layer observation at the target position.
#[derive(Debug, Clone, PartialEq)]
pub struct RawLayer {
    pub hidden_state: Vec<f32>,
    /// One post-softmax row per head, each of length `target_position`.
    pub attention_rows: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenProb {
    pub token_id: u32,
    pub probability: f32,
}

/// Pre-decoded per-layer observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedLayer {
    /// Sorted by descending probability, exact ties toward the lower token id.
    pub topk: Vec<TokenProb>,
    /// Entropy of the full vocabulary distribution, in nats.
    pub entropy: f32,
    pub img_attn: f32,
    pub txt_attn: f32,
}

impl DecodedLayer {
    pub fn top1(&self) -> Option<u32> {
        self.topk.first().map(|t| t.token_id)
    }
}

/// Per-layer observations; the tier is uniform across a sample by construction.
#[derive(Debug, Clone, PartialEq)]
pub enum Layers {
    Raw(Vec<RawLayer>),
    Decoded(Vec<DecodedLayer>),
}

impl Layers {
    pub fn len(&self) -> usize {
        match self {
            Layers::Raw(v) => v.len(),
            Layers::Decoded(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tier(&self) -> Tier {
        match self {
            Layers::Raw(_) => Tier::Raw,
            Layers::Decoded(_) => Tier::Decoded,
        }
    }
}

/// One next-token prediction event.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub sample_id: String,
    pub prefix_token_ids: Vec<u32>,
    /// Position of the predicted token; every indexed position lies before it.
    pub target_position: usize,
    pub image_indices: Vec<u32>,
    pub text_indices: Vec<u32>,
    pub layers: Layers,
    pub final_token_id: u32,
    pub final_token_string: String,
}

impl SampleTrace {
    pub fn tier(&self) -> Tier {
        self.layers.tier()
    }

    /// Checks the sample against the owning head's dimensions and the
    /// per-tier numeric invariants.
    pub fn validate(&self, head: &ModelHead) -> Result<(), String> {
        let id = &self.sample_id;
        if self.layers.len() != head.num_layers {
            return Err(format!(
                "sample {id}: {} layers, head declares {}",
                self.layers.len(),
                head.num_layers
            ));
        }
        let vocab = head.vocab_size as u64;
        if self.final_token_id as u64 >= vocab {
            return Err(format!("sample {id}: final token id out of vocabulary"));
        }
        if let Some(bad) = self.prefix_token_ids.iter().find(|&&t| t as u64 >= vocab) {
            return Err(format!("sample {id}: prefix token {bad} out of vocabulary"));
        }
        let t = self.target_position as u64;
        let mut seen = HashSet::new();
        for &i in &self.image_indices {
            if i as u64 >= t {
                return Err(format!("sample {id}: image index {i} not before target {t}"));
            }
            if !seen.insert(i) {
                return Err(format!("sample {id}: duplicate image index {i}"));
            }
        }
        let mut text_seen = HashSet::new();
        for &i in &self.text_indices {
            if i as u64 >= t {
                return Err(format!("sample {id}: text index {i} not before target {t}"));
            }
            if seen.contains(&i) {
                return Err(format!("sample {id}: index {i} is both image and text"));
            }
            if !text_seen.insert(i) {
                return Err(format!("sample {id}: duplicate text index {i}"));
            }
        }
        match &self.layers {
            Layers::Raw(layers) => {
                if head.lens.is_none() {
                    return Err(format!("sample {id}: raw tier requires a projection head"));
                }
                for (l, layer) in layers.iter().enumerate() {
                    validate_raw_layer(layer, head, self.target_position)
                        .map_err(|e| format!("sample {id} layer {}: {e}", l + 1))?;
                }
            }
            Layers::Decoded(layers) => {
                for (l, layer) in layers.iter().enumerate() {
                    validate_decoded_layer(layer, head)
                        .map_err(|e| format!("sample {id} layer {}: {e}", l + 1))?;
                }
            }
        }
        Ok(())
    }
}

fn validate_raw_layer(layer: &RawLayer, head: &ModelHead, t: usize) -> Result<(), String> {
    if layer.hidden_state.len() != head.hidden_dim {
        return Err(format!(
            "hidden state has {} entries, expected {}",
            layer.hidden_state.len(),
            head.hidden_dim
        ));
    }
    if layer.hidden_state.iter().any(|x| !x.is_finite()) {
        return Err("non-finite hidden state".into());
    }
    if layer.attention_rows.len() != head.num_heads {
        return Err(format!(
            "{} attention rows, expected {}",
            layer.attention_rows.len(),
            head.num_heads
        ));
    }
    for (h, row) in layer.attention_rows.iter().enumerate() {
        if row.len() != t {
            return Err(format!("head {h}: row length {} != target position {t}", row.len()));
        }
        if row.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(format!("head {h}: attention weight outside [0,1]"));
        }
        if t > 0 {
            let sum: f64 = row.iter().map(|&a| f64::from(a)).sum();
            if (sum - 1.0).abs() > ATTENTION_ROW_TOLERANCE {
                return Err(format!("head {h}: attention row sums to {sum}"));
            }
        }
    }
    Ok(())
}

fn validate_decoded_layer(layer: &DecodedLayer, head: &ModelHead) -> Result<(), String> {
    if layer.topk.is_empty() {
        return Err("empty top-k list".into());
    }
    if layer.topk.len() > head.vocab_size {
        return Err("top-k list longer than the vocabulary".into());
    }
    let mut sum = 0.0f64;
    let mut ids = HashSet::new();
    for (i, tp) in layer.topk.iter().enumerate() {
        if !ids.insert(tp.token_id) {
            return Err(format!("duplicate top-k token {}", tp.token_id));
        }
        if tp.token_id as usize >= head.vocab_size {
            return Err(format!("top-k token {} out of vocabulary", tp.token_id));
        }
        if !(tp.probability > 0.0 && tp.probability <= 1.0) {
            return Err(format!("top-k probability {} outside (0,1]", tp.probability));
        }
        if i > 0 {
            let prev = layer.topk[i - 1];
            // Exact f64 ties break toward the lower id, but distinct f64
            // values may round to the same f32, so equal stored values are
            // accepted in either id order.
            if prev.probability < tp.probability {
                return Err("top-k list not in descending order".into());
            }
        }
        sum += f64::from(tp.probability);
    }
    if sum > 1.0 + TOPK_SUM_TOLERANCE {
        return Err(format!("top-k probabilities sum to {sum}"));
    }
    let max_entropy = (head.vocab_size as f64).ln();
    let entropy = f64::from(layer.entropy);
    if !(entropy >= 0.0 && entropy <= max_entropy * (1.0 + 1e-6) + 1e-6) {
        return Err(format!("entropy {entropy} outside [0, ln V]"));
    }
    for (name, v) in [("img_attn", layer.img_attn), ("txt_attn", layer.txt_attn)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("{name} {v} outside [0,1]"));
        }
    }
    Ok(())
}
