//! The `OEMB` embedding sidecar: unit-norm vectors keyed by token string.
//!
//! ```text
//! "OEMB" version:u8 dim:u32 count:u32 (token:str vector:f32[dim])*
//! ```

use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use crate::codec::{len_u32, ByteReader, ByteSink, CodecError};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"OEMB";
pub const EMBEDDING_VERSION: u8 = 1;

/// Vectors further than this from unit norm are rejected.
const NORM_ACCEPT: f64 = 1e-3;
/// Vectors within this of unit norm are stored as-is.
const NORM_EXACT: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"OEMB\"")]
    BadMagic([u8; 4]),
    #[error("unsupported embedding version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated embedding table: {0}")]
    Truncated(CodecError),
    #[error("malformed embedding table: {0}")]
    Malformed(String),
    #[error("non-finite value in embedding for {0:?}")]
    NonFinite(String),
    #[error("embedding for {token:?} has norm {norm}")]
    NormViolation { token: String, norm: f64 },
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("embedding for {token:?} has length {len}, table dim is {dim}")]
    DimensionMismatch { token: String, len: usize, dim: usize },
    #[error("trailing bytes after the last entry")]
    TrailingBytes,
}

impl From<CodecError> for EmbeddingError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Truncated { .. } => EmbeddingError::Truncated(e),
            CodecError::InvalidUtf8(_) => EmbeddingError::Malformed(e.to_string()),
        }
    }
}

/// Unit-norm vectors keyed by token string, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: IndexMap<String, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::Malformed("dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            entries: IndexMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds a vector, renormalizing it when it is within 1e-3 of unit norm.
    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f32>) -> Result<(), EmbeddingError> {
        let token = token.into();
        if vector.len() != self.dim {
            return Err(EmbeddingError::DimensionMismatch {
                token,
                len: vector.len(),
                dim: self.dim,
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::NonFinite(token));
        }
        if self.entries.contains_key(&token) {
            return Err(EmbeddingError::DuplicateToken(token));
        }
        let norm = vector.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_ACCEPT {
            return Err(EmbeddingError::NormViolation { token, norm });
        }
        let vector = if (norm - 1.0).abs() > NORM_EXACT {
            vector.iter().map(|&x| (f64::from(x) / norm) as f32).collect()
        } else {
            vector
        };
        self.entries.insert(token, vector);
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.entries.get(token).map(Vec::as_slice)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entries.contains_key(token)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Cosine similarity of two stored tokens.
    pub fn cosine(&self, a: &str, b: &str) -> Option<f64> {
        Some(cosine(self.get(a)?, self.get(b)?))
    }
}

/// Cosine similarity computed in f64; zero when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

pub fn encode_embedding_table(table: &EmbeddingTable) -> Result<Vec<u8>, EmbeddingError> {
    let mut out = Vec::new();
    out.extend_from_slice(&EMBEDDING_MAGIC);
    out.put_u8(EMBEDDING_VERSION);
    out.put_u32(len_u32(table.dim, "dimension").map_err(EmbeddingError::Malformed)?);
    out.put_u32(len_u32(table.len(), "entry count").map_err(EmbeddingError::Malformed)?);
    for (token, vector) in table.iter() {
        out.put_str(token);
        out.put_f32s(vector);
    }
    Ok(out)
}

pub fn decode_embedding_table(bytes: &[u8]) -> Result<EmbeddingTable, EmbeddingError> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != EMBEDDING_MAGIC {
        let mut m = [0u8; 4];
        m.copy_from_slice(magic);
        return Err(EmbeddingError::BadMagic(m));
    }
    let version = r.u8()?;
    if version != EMBEDDING_VERSION {
        return Err(EmbeddingError::UnsupportedVersion(version));
    }
    let dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut table = EmbeddingTable::new(dim)?;
    for _ in 0..count {
        let token = r.string()?;
        let vector = r.f32_vec(dim)?;
        table.insert(token, vector)?;
    }
    if r.remaining() > 0 {
        return Err(EmbeddingError::TrailingBytes);
    }
    Ok(table)
}

pub fn read_embedding_table(path: impl AsRef<Path>) -> Result<EmbeddingTable, EmbeddingError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_embedding_table(&bytes)
}

pub fn write_embedding_table(
    table: &EmbeddingTable,
    path: impl AsRef<Path>,
) -> Result<(), EmbeddingError> {
    let path = path.as_ref();
    std::fs::write(path, encode_embedding_table(table)?).map_err(|source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_file(dim: u32, entries: &[(&str, &[f32])]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"OEMB");
        out.put_u8(1);
        out.put_u32(dim);
        out.put_u32(entries.len() as u32);
        for (t, v) in entries {
            out.put_str(t);
            out.put_f32s(v);
        }
        out
    }

    #[test]
    fn reads_two_entries() {
        let t = decode_embedding_table(&raw_file(2, &[("cat", &[1.0, 0.0]), ("dog", &[0.0, 1.0])]))
            .unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.dim(), 2);
        assert_eq!(t.cosine("cat", "dog"), Some(0.0));
    }

    #[test]
    fn rejects_short_vector() {
        let err = decode_embedding_table(&raw_file(2, &[("cat", &[0.5, 0.0])])).unwrap_err();
        assert!(matches!(err, EmbeddingError::NormViolation { norm, .. } if (norm - 0.5).abs() < 1e-12));
    }

    #[test]
    fn rejects_duplicates() {
        let err = decode_embedding_table(&raw_file(2, &[("cat", &[1.0, 0.0]), ("cat", &[0.0, 1.0])]))
            .unwrap_err();
        assert!(matches!(err, EmbeddingError::DuplicateToken(t) if t == "cat"));
    }

    #[test]
    fn renormalizes_near_unit_vectors() {
        let t = decode_embedding_table(&raw_file(2, &[("cat", &[1.0005, 0.0])])).unwrap();
        let v = t.get("cat").unwrap();
        assert!((f64::from(v[0]) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn corruption() {
        let good = raw_file(2, &[("cat", &[1.0, 0.0])]);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_embedding_table(&bad), Err(EmbeddingError::BadMagic(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_embedding_table(&bad), Err(EmbeddingError::UnsupportedVersion(9))));
        assert!(matches!(
            decode_embedding_table(&good[..good.len() - 1]),
            Err(EmbeddingError::Truncated(_))
        ));
        let nan = raw_file(2, &[("cat", &[f32::NAN, 0.0])]);
        assert!(matches!(decode_embedding_table(&nan), Err(EmbeddingError::NonFinite(_))));
    }
}
