//! Replicated key-value store.

use std::collections::BTreeMap;

use super::{noop_result, AppError, AppOutput, Application};
use crate::digest::Digest;
use crate::wire::{Reader, Writer};

const OP_PUT: u8 = 1;
const OP_GET: u8 = 2;
const OP_DELETE: u8 = 3;

const RES_OK: u8 = 0;
const RES_VALUE: u8 = 1;
const RES_NOT_FOUND: u8 = 2;
const RES_PARSE_ERROR: u8 = 3;

/// Operations accepted by the store, with their canonical byte encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvsOp {
    Put { key: Vec<u8>, value: Vec<u8> },
    Get { key: Vec<u8> },
    Delete { key: Vec<u8> },
}

impl KvsOp {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            KvsOp::Put { key, value } => {
                w.u8(OP_PUT);
                w.bytes(key);
                w.bytes(value);
            }
            KvsOp::Get { key } => {
                w.u8(OP_GET);
                w.bytes(key);
            }
            KvsOp::Delete { key } => {
                w.u8(OP_DELETE);
                w.bytes(key);
            }
        }
        w.finish()
    }

    pub fn decode(input: &[u8]) -> Option<KvsOp> {
        let mut r = Reader::new(input);
        let op = match r.u8().ok()? {
            OP_PUT => KvsOp::Put {
                key: r.bytes().ok()?,
                value: r.bytes().ok()?,
            },
            OP_GET => KvsOp::Get { key: r.bytes().ok()? },
            OP_DELETE => KvsOp::Delete { key: r.bytes().ok()? },
            _ => return None,
        };
        r.expect_end().ok()?;
        Some(op)
    }
}

/// Decoded result of a KVS operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvsResult {
    Ok,
    Value(Vec<u8>),
    NotFound,
    ParseError,
    Noop,
}

impl KvsResult {
    pub fn decode(input: &[u8]) -> Option<KvsResult> {
        if input == b"NOOP" {
            return Some(KvsResult::Noop);
        }
        let mut r = Reader::new(input);
        let res = match r.u8().ok()? {
            RES_OK => KvsResult::Ok,
            RES_VALUE => KvsResult::Value(r.bytes().ok()?),
            RES_NOT_FOUND => KvsResult::NotFound,
            RES_PARSE_ERROR => KvsResult::ParseError,
            _ => return None,
        };
        Some(res)
    }
}

#[derive(Default)]
pub struct KvStore {
    map: BTreeMap<Vec<u8>, Vec<u8>>,
}

impl KvStore {
    pub fn new() -> Self {
        KvStore::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl Application for KvStore {
    fn apply(&mut self, op: &[u8]) -> AppOutput {
        let Some(op) = KvsOp::decode(op) else {
            let mut out = noop_result();
            out.result = vec![RES_PARSE_ERROR];
            return out;
        };
        let mut w = Writer::new();
        match op {
            KvsOp::Put { key, value } => {
                self.map.insert(key, value);
                w.u8(RES_OK);
            }
            KvsOp::Get { key } => match self.map.get(&key) {
                Some(v) => {
                    w.u8(RES_VALUE);
                    w.bytes(v);
                }
                None => w.u8(RES_NOT_FOUND),
            },
            KvsOp::Delete { key } => match self.map.remove(&key) {
                Some(v) => {
                    w.u8(RES_VALUE);
                    w.bytes(&v);
                }
                None => w.u8(RES_NOT_FOUND),
            },
        }
        AppOutput {
            result: w.finish(),
            blocks: Vec::new(),
        }
    }

    fn digest(&self) -> Digest {
        Digest::of(&self.snapshot())
    }

    fn snapshot(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.map.len() as u32);
        for (k, v) in &self.map {
            w.bytes(k);
            w.bytes(v);
        }
        w.finish()
    }

    fn restore(&mut self, blob: &[u8]) -> Result<(), AppError> {
        let mut r = Reader::new(blob);
        let count = r.u32().map_err(|_| AppError::BadSnapshot)?;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let k = r.bytes().map_err(|_| AppError::BadSnapshot)?;
            let v = r.bytes().map_err(|_| AppError::BadSnapshot)?;
            map.insert(k, v);
        }
        r.expect_end().map_err(|_| AppError::BadSnapshot)?;
        self.map = map;
        Ok(())
    }

    fn fresh(&self) -> Box<dyn Application> {
        Box::new(KvStore::new())
    }

    fn name(&self) -> &'static str {
        "kvs"
    }
}
