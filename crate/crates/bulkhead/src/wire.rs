//! Canonical binary encoding primitives.
//!
//! All integers are big-endian and fixed-width; variable-length byte strings
//! and lists carry a `u32` length prefix. Decoding never panics: every read
//! is bounds-checked and untrusted input yields [`WireError`].
//!
//! The byte-level layout of each message is documented in
//! `docs/wire-format.md`.

use thiserror::Error;

use crate::digest::{Digest, DIGEST_LEN};

/// Hard cap on any single length prefix, so garbage input cannot trigger
/// huge allocations.
pub const MAX_FIELD_LEN: u32 = 16 * 1024 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated input: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("unknown message tag {0:#04x}")]
    UnknownTag(u8),
    #[error("unsupported wire version {0:#04x}")]
    BadVersion(u8),
    #[error("length prefix {0} exceeds limit")]
    OversizedField(u32),
    #[error("trailing garbage after message body")]
    TrailingBytes,
    #[error("malformed field: {0}")]
    Malformed(&'static str),
}

/// Append-only canonical writer.
#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }

    pub fn digest(&mut self, d: &Digest) {
        self.buf.extend_from_slice(d.as_bytes());
    }

    /// Length-prefixed list; `f` encodes each element.
    pub fn list<T>(&mut self, items: &[T], mut f: impl FnMut(&mut Writer, &T)) {
        self.u32(items.len() as u32);
        for it in items {
            f(self, it);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }
}

/// Bounds-checked canonical reader.
pub struct Reader<'a> {
    input: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        Reader { input, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.input.len() - self.pos
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < len {
            return Err(WireError::Truncated {
                needed: len - self.remaining(),
            });
        }
        let s = &self.input[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let len = self.u32()?;
        if len > MAX_FIELD_LEN {
            return Err(WireError::OversizedField(len));
        }
        Ok(self.take(len as usize)?.to_vec())
    }

    pub fn digest(&mut self) -> Result<Digest, WireError> {
        let s = self.take(DIGEST_LEN)?;
        Digest::from_slice(s).ok_or(WireError::Malformed("digest"))
    }

    pub fn list<T>(
        &mut self,
        mut f: impl FnMut(&mut Reader<'a>) -> Result<T, WireError>,
    ) -> Result<Vec<T>, WireError> {
        let count = self.u32()?;
        if count > MAX_FIELD_LEN {
            return Err(WireError::OversizedField(count));
        }
        // Each element consumes at least one byte; reject counts the input
        // cannot possibly satisfy before allocating.
        if count as usize > self.remaining() {
            return Err(WireError::Truncated {
                needed: count as usize - self.remaining(),
            });
        }
        let mut out = Vec::with_capacity(count as usize);
        for _ in 0..count {
            out.push(f(self)?);
        }
        Ok(out)
    }

    pub fn expect_end(&self) -> Result<(), WireError> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(WireError::TrailingBytes)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_scalars() {
        let mut w = Writer::new();
        w.u8(7);
        w.u32(0xdead_beef);
        w.u64(42);
        w.bytes(b"hello");
        let buf = w.finish();

        let mut r = Reader::new(&buf);
        assert_eq!(r.u8().unwrap(), 7);
        assert_eq!(r.u32().unwrap(), 0xdead_beef);
        assert_eq!(r.u64().unwrap(), 42);
        assert_eq!(r.bytes().unwrap(), b"hello");
        r.expect_end().unwrap();
    }

    #[test]
    fn truncation_is_an_error() {
        let mut r = Reader::new(&[0, 0]);
        assert!(matches!(r.u32(), Err(WireError::Truncated { .. })));
    }

    #[test]
    fn oversized_length_rejected() {
        let mut w = Writer::new();
        w.u32(u32::MAX);
        let buf = w.finish();
        let mut r = Reader::new(&buf);
        assert!(matches!(r.bytes(), Err(WireError::OversizedField(_))));
    }

    #[test]
    fn hostile_list_count_rejected_before_alloc() {
        let mut w = Writer::new();
        w.u32(1_000_000);
        let buf = w.finish();
        let mut r = Reader::new(&buf);
        assert!(r.list(|r| r.u8()).is_err());
    }
}
