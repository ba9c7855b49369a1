//! Little-endian primitives shared by the binary container formats.
//!
//! Readers work on in-memory byte slices so that every length prefix can be
//! checked against the bytes actually remaining before anything is allocated.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("truncated input: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("invalid UTF-8 string at offset {0}")]
    InvalidUtf8(usize),
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if n > self.remaining() {
            return Err(CodecError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    /// Fails with `Truncated` unless `count` items of `width` bytes are left.
    pub fn ensure(&self, count: usize, width: usize) -> Result<(), CodecError> {
        let needed = count.saturating_mul(width);
        if needed > self.remaining() {
            return Err(CodecError::Truncated {
                offset: self.pos,
                needed,
                available: self.remaining(),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_bits(self.u32()?))
    }

    pub fn f64(&mut self) -> Result<f64, CodecError> {
        let b = self.take(8)?;
        let mut raw = [0u8; 8];
        raw.copy_from_slice(b);
        Ok(f64::from_le_bytes(raw))
    }

    pub fn string(&mut self) -> Result<String, CodecError> {
        let len = self.u32()? as usize;
        let start = self.pos;
        let bytes = self.take(len)?;
        std::str::from_utf8(bytes)
            .map(str::to_owned)
            .map_err(|_| CodecError::InvalidUtf8(start))
    }

    pub fn u32_vec(&mut self, n: usize) -> Result<Vec<u32>, CodecError> {
        self.ensure(n, 4)?;
        (0..n).map(|_| self.u32()).collect()
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>, CodecError> {
        self.ensure(n, 4)?;
        (0..n).map(|_| self.f32()).collect()
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>, CodecError> {
        self.ensure(n, 8)?;
        (0..n).map(|_| self.f64()).collect()
    }
}

pub(crate) trait ByteSink {
    fn put_u8(&mut self, v: u8);
    fn put_u32(&mut self, v: u32);
    fn put_f32(&mut self, v: f32);
    fn put_f64(&mut self, v: f64);
    fn put_str(&mut self, s: &str);
    fn put_f32s(&mut self, v: &[f32]) {
        v.iter().for_each(|&x| self.put_f32(x));
    }
    fn put_f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.put_f64(x));
    }
    fn put_u32s(&mut self, v: &[u32]) {
        v.iter().for_each(|&x| self.put_u32(x));
    }
}

impl ByteSink for Vec<u8> {
    fn put_u8(&mut self, v: u8) {
        self.push(v);
    }
    fn put_u32(&mut self, v: u32) {
        self.extend_from_slice(&v.to_le_bytes());
    }
    fn put_f32(&mut self, v: f32) {
        self.extend_from_slice(&v.to_le_bytes());
    }
    fn put_f64(&mut self, v: f64) {
        self.extend_from_slice(&v.to_le_bytes());
    }
    fn put_str(&mut self, s: &str) {
        self.put_u32(s.len() as u32);
        self.extend_from_slice(s.as_bytes());
    }
}

/// Converts a length to the on-disk `u32` field, failing for absurd sizes.
pub(crate) fn len_u32(n: usize, what: &str) -> Result<u32, String> {
    u32::try_from(n).map_err(|_| format!("{what} length {n} exceeds u32 range"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_is_reported_before_allocation() {
        let mut bytes = Vec::new();
        bytes.put_u32(3);
        let mut r = ByteReader::new(&bytes);
        let n = r.u32().unwrap() as usize;
        assert!(matches!(r.f32_vec(n), Err(CodecError::Truncated { .. })));
        let mut r = ByteReader::new(&[0xff, 0xff, 0xff, 0xff]);
        assert!(matches!(r.string(), Err(CodecError::Truncated { .. })));
    }

    #[test]
    fn strings_must_be_utf8() {
        let mut bytes = Vec::new();
        bytes.put_u32(2);
        bytes.extend_from_slice(&[0xc3, 0x28]);
        assert_eq!(
            ByteReader::new(&bytes).string(),
            Err(CodecError::InvalidUtf8(4))
        );
    }
}
