//! The `OTHD` trace container.
//!
//! Layout (all integers `u32`, all reals `f32`, little-endian):
//!
//! ```text
//! "OTHD" version:u8 tier:u8 has_lens:u8 model_id:str
//! num_layers num_heads hidden_dim vocab_size num_samples
//! [lens]   projection[V*d] norm_gain[d] norm_bias[d] norm_epsilon
//! sample*  sample_id:str final_token_string:str final_token_id target_position
//!          n_prefix prefix[n] n_img img[n] n_txt txt[n]
//!          layer* raw:     hidden[d] attention[H*t]
//!                 decoded: k (token_id probability)[k] entropy img_attn txt_attn
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8 bytes.

use std::path::Path;

use thiserror::Error;

use super::{DecodedLayer, Layers, LensParams, ModelHead, RawLayer, SampleTrace, Tier, TokenProb};
use crate::codec::{len_u32, ByteReader, ByteSink, CodecError};

pub const TRACE_MAGIC: [u8; 4] = *b"OTHD";
pub const TRACE_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"OTHD\"")]
    BadMagic([u8; 4]),
    #[error("unsupported trace version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated trace: {0}")]
    Truncated(CodecError),
    #[error("non-finite value in tensor section {0}")]
    NonFiniteTensor(String),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("samples mix raw and decoded tiers")]
    MixedTiers,
    #[error("{0} trailing bytes after the last sample")]
    TrailingBytes(usize),
}

impl From<CodecError> for TraceError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Truncated { .. } => TraceError::Truncated(e),
            CodecError::InvalidUtf8(_) => TraceError::BadHeader(e.to_string()),
        }
    }
}

/// Contents of one trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub head: ModelHead,
    pub samples: Vec<SampleTrace>,
}

impl Trace {
    /// Tier of the samples; an empty trace is raw iff it carries a lens.
    pub fn tier(&self) -> Tier {
        match self.samples.first() {
            Some(s) => s.tier(),
            None if self.head.lens.is_some() => Tier::Raw,
            None => Tier::Decoded,
        }
    }
}

pub fn write_trace_file(
    head: &ModelHead,
    samples: &[SampleTrace],
    path: impl AsRef<Path>,
) -> Result<(), TraceError> {
    let bytes = encode_trace(head, samples)?;
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<Trace, TraceError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_trace(&bytes)
}

fn check_dimensions(sample: &SampleTrace, head: &ModelHead) -> Result<(), TraceError> {
    let id = &sample.sample_id;
    let mismatch = |msg: String| Err(TraceError::DimensionMismatch(format!("sample {id}: {msg}")));
    if sample.layers.len() != head.num_layers {
        return mismatch(format!(
            "{} layers, head declares {}",
            sample.layers.len(),
            head.num_layers
        ));
    }
    if let Layers::Raw(layers) = &sample.layers {
        for layer in layers {
            if layer.hidden_state.len() != head.hidden_dim {
                return mismatch(format!(
                    "hidden state length {} != {}",
                    layer.hidden_state.len(),
                    head.hidden_dim
                ));
            }
            if layer.attention_rows.len() != head.num_heads {
                return mismatch(format!(
                    "{} attention heads != {}",
                    layer.attention_rows.len(),
                    head.num_heads
                ));
            }
            if let Some(row) = layer
                .attention_rows
                .iter()
                .find(|r| r.len() != sample.target_position)
            {
                return mismatch(format!(
                    "attention row length {} != target position {}",
                    row.len(),
                    sample.target_position
                ));
            }
        }
    }
    Ok(())
}

pub fn encode_trace(head: &ModelHead, samples: &[SampleTrace]) -> Result<Vec<u8>, TraceError> {
    head.validate().map_err(TraceError::BadHeader)?;
    let tier = match samples.first() {
        Some(s) => s.tier(),
        None if head.lens.is_some() => Tier::Raw,
        None => Tier::Decoded,
    };
    if samples.iter().any(|s| s.tier() != tier) {
        return Err(TraceError::MixedTiers);
    }
    for s in samples {
        check_dimensions(s, head)?;
        s.validate(head).map_err(TraceError::InvalidSample)?;
    }
    let header = |e: String| TraceError::BadHeader(e);

    let mut out = Vec::new();
    out.extend_from_slice(&TRACE_MAGIC);
    out.put_u8(TRACE_VERSION);
    out.put_u8(tier.code());
    out.put_u8(u8::from(head.lens.is_some()));
    out.put_str(&head.model_id);
    for dim in [head.num_layers, head.num_heads, head.hidden_dim, head.vocab_size] {
        out.put_u32(len_u32(dim, "dimension").map_err(header)?);
    }
    out.put_u32(len_u32(samples.len(), "sample list").map_err(header)?);
    if let Some(lens) = &head.lens {
        out.put_f32s(&lens.projection);
        out.put_f32s(&lens.norm_gain);
        out.put_f32s(&lens.norm_bias);
        out.put_f32(lens.norm_epsilon);
    }
    for s in samples {
        let dim = |n: usize, what: &str| len_u32(n, what).map_err(TraceError::DimensionMismatch);
        out.put_str(&s.sample_id);
        out.put_str(&s.final_token_string);
        out.put_u32(s.final_token_id);
        out.put_u32(dim(s.target_position, "target position")?);
        for list in [&s.prefix_token_ids, &s.image_indices, &s.text_indices] {
            out.put_u32(dim(list.len(), "index list")?);
            out.put_u32s(list);
        }
        match &s.layers {
            Layers::Raw(layers) => {
                for layer in layers {
                    out.put_f32s(&layer.hidden_state);
                    for row in &layer.attention_rows {
                        out.put_f32s(row);
                    }
                }
            }
            Layers::Decoded(layers) => {
                for layer in layers {
                    out.put_u32(dim(layer.topk.len(), "top-k list")?);
                    for tp in &layer.topk {
                        out.put_u32(tp.token_id);
                        out.put_f32(tp.probability);
                    }
                    out.put_f32(layer.entropy);
                    out.put_f32(layer.img_attn);
                    out.put_f32(layer.txt_attn);
                }
            }
        }
    }
    Ok(out)
}

fn finite(values: Vec<f32>, section: &str) -> Result<Vec<f32>, TraceError> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(values)
    } else {
        Err(TraceError::NonFiniteTensor(section.to_owned()))
    }
}

fn finite_scalar(v: f32, section: &str) -> Result<f32, TraceError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TraceError::NonFiniteTensor(section.to_owned()))
    }
}

/// Parses and validates a complete trace container.
pub fn decode_trace(bytes: &[u8]) -> Result<Trace, TraceError> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != TRACE_MAGIC {
        let mut m = [0u8; 4];
        m.copy_from_slice(magic);
        return Err(TraceError::BadMagic(m));
    }
    let version = r.u8()?;
    if version != TRACE_VERSION {
        return Err(TraceError::UnsupportedVersion(version));
    }
    let tier_code = r.u8()?;
    let tier = Tier::from_code(tier_code)
        .ok_or_else(|| TraceError::BadHeader(format!("unknown tier code {tier_code}")))?;
    let has_lens = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(TraceError::BadHeader(format!("bad lens flag {other}"))),
    };
    let model_id = r.string()?;
    let num_layers = r.u32()? as usize;
    let num_heads = r.u32()? as usize;
    let hidden_dim = r.u32()? as usize;
    let vocab_size = r.u32()? as usize;
    let num_samples = r.u32()? as usize;
    let mut head = ModelHead {
        model_id,
        num_layers,
        num_heads,
        hidden_dim,
        vocab_size,
        lens: None,
    };
    // Dimension sanity before any tensor allocation.
    head.validate().map_err(TraceError::BadHeader)?;
    if tier == Tier::Raw && !has_lens {
        return Err(TraceError::BadHeader("raw tier without projection head".into()));
    }
    // An empty trace's tier is implied by the lens flag.
    if tier == Tier::Decoded && has_lens && num_samples == 0 {
        return Err(TraceError::BadHeader("empty decoded trace with a projection head".into()));
    }
    if has_lens {
        let entries = vocab_size.checked_mul(hidden_dim).ok_or_else(|| {
            TraceError::BadHeader("projection size overflows".into())
        })?;
        let projection = finite(r.f32_vec(entries)?, "projection")?;
        let norm_gain = finite(r.f32_vec(hidden_dim)?, "norm_gain")?;
        let norm_bias = finite(r.f32_vec(hidden_dim)?, "norm_bias")?;
        let norm_epsilon = finite_scalar(r.f32()?, "norm_epsilon")?;
        head.lens = Some(LensParams {
            projection,
            norm_gain,
            norm_bias,
            norm_epsilon,
        });
        head.validate().map_err(TraceError::BadHeader)?;
    }

    let mut samples = Vec::new();
    for _ in 0..num_samples {
        let sample = read_sample(&mut r, &head, tier)?;
        sample.validate(&head).map_err(TraceError::InvalidSample)?;
        samples.push(sample);
    }
    if r.remaining() > 0 {
        return Err(TraceError::TrailingBytes(r.remaining()));
    }
    Ok(Trace { head, samples })
}

fn read_sample(r: &mut ByteReader<'_>, head: &ModelHead, tier: Tier) -> Result<SampleTrace, TraceError> {
    let sample_id = r.string()?;
    let final_token_string = r.string()?;
    let final_token_id = r.u32()?;
    let target_position = r.u32()? as usize;
    let mut lists = Vec::with_capacity(3);
    for _ in 0..3 {
        let n = r.u32()? as usize;
        lists.push(r.u32_vec(n)?);
    }
    let text_indices = lists.pop().unwrap_or_default();
    let image_indices = lists.pop().unwrap_or_default();
    let prefix_token_ids = lists.pop().unwrap_or_default();

    let layers = match tier {
        Tier::Raw => {
            // Upper bound on bytes per layer, checked before the loop allocates.
            let per_layer = head
                .num_heads
                .checked_mul(target_position)
                .and_then(|n| n.checked_add(head.hidden_dim))
                .ok_or_else(|| TraceError::BadHeader("layer size overflows".into()))?;
            r.ensure(per_layer, 4)?;
            let mut layers = Vec::new();
            for _ in 0..head.num_layers {
                let hidden_state = finite(r.f32_vec(head.hidden_dim)?, "hidden_state")?;
                let mut attention_rows = Vec::new();
                for _ in 0..head.num_heads {
                    attention_rows.push(finite(r.f32_vec(target_position)?, "attention")?);
                }
                layers.push(RawLayer {
                    hidden_state,
                    attention_rows,
                });
            }
            Layers::Raw(layers)
        }
        Tier::Decoded => {
            let mut layers = Vec::new();
            for _ in 0..head.num_layers {
                let k = r.u32()? as usize;
                r.ensure(k, 8)?;
                let mut topk = Vec::with_capacity(k);
                for _ in 0..k {
                    let token_id = r.u32()?;
                    let probability = finite_scalar(r.f32()?, "topk")?;
                    topk.push(TokenProb {
                        token_id,
                        probability,
                    });
                }
                let entropy = finite_scalar(r.f32()?, "entropy")?;
                let img_attn = finite_scalar(r.f32()?, "img_attn")?;
                let txt_attn = finite_scalar(r.f32()?, "txt_attn")?;
                layers.push(DecodedLayer {
                    topk,
                    entropy,
                    img_attn,
                    txt_attn,
                });
            }
            Layers::Decoded(layers)
        }
    };
    Ok(SampleTrace {
        sample_id,
        prefix_token_ids,
        target_position,
        image_indices,
        text_indices,
        layers,
        final_token_id,
        final_token_string,
    })
}
