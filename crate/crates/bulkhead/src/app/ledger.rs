//! Block-producing ledger: every fifth request seals a block, chained by
//! digest, and emits a persistence effect through the enclave boundary. The
//! environment stores ciphertext only and acknowledges the write so the
//! enclave can release the block from memory.

use std::collections::BTreeMap;

use super::{AppError, AppOutput, Application};
use crate::crypto::seal_blob;
use crate::digest::Digest;
use crate::wire::{Reader, Writer};

/// Requests per block.
pub const BLOCK_SIZE: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerBlock {
    pub index: u64,
    pub prev_digest: Digest,
    pub ops: Vec<Vec<u8>>,
    pub digest: Digest,
}

impl LedgerBlock {
    fn build(index: u64, prev_digest: Digest, ops: Vec<Vec<u8>>) -> Self {
        let mut w = Writer::new();
        w.u64(index);
        w.digest(&prev_digest);
        w.list(&ops, |w, op| w.bytes(op));
        let digest = Digest::of(w.as_slice());
        LedgerBlock {
            index,
            prev_digest,
            ops,
            digest,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.index);
        w.digest(&self.prev_digest);
        w.list(&self.ops, |w, op| w.bytes(op));
        w.digest(&self.digest);
        w.finish()
    }

    pub fn decode(input: &[u8]) -> Option<LedgerBlock> {
        let mut r = Reader::new(input);
        let index = r.u64().ok()?;
        let prev_digest = r.digest().ok()?;
        let ops = r.list(|r| r.bytes()).ok()?;
        let digest = r.digest().ok()?;
        r.expect_end().ok()?;
        let rebuilt = LedgerBlock::build(index, prev_digest, ops);
        if rebuilt.digest != digest {
            return None;
        }
        Some(rebuilt)
    }
}

/// Verify an ordered chain of blocks links correctly by digest.
pub fn verify_chain(blocks: &[LedgerBlock]) -> bool {
    let mut prev = Digest::ZERO;
    for (i, b) in blocks.iter().enumerate() {
        if b.index != i as u64 || b.prev_digest != prev {
            return false;
        }
        let rebuilt = LedgerBlock::build(b.index, b.prev_digest, b.ops.clone());
        if rebuilt.digest != b.digest {
            return false;
        }
        prev = b.digest;
    }
    true
}

pub struct Ledger {
    sealing_key: [u8; 32],
    seal_role: u32,
    seal_counter: u64,
    head: Digest,
    next_index: u64,
    pending: Vec<Vec<u8>>,
    /// Blocks emitted but not yet acknowledged by the environment.
    unacked: BTreeMap<u64, LedgerBlock>,
}

impl Ledger {
    pub fn new(sealing_key: [u8; 32], seal_role: u32) -> Self {
        Ledger {
            sealing_key,
            seal_role,
            seal_counter: 0,
            head: Digest::ZERO,
            next_index: 0,
            pending: Vec::new(),
            unacked: BTreeMap::new(),
        }
    }

    pub fn chain_head(&self) -> Digest {
        self.head
    }

    pub fn blocks_sealed(&self) -> u64 {
        self.next_index
    }

    /// Open a sealed block produced by any Execution enclave.
    pub fn open_block(sealing_key: &[u8; 32], sealed: &[u8]) -> Option<LedgerBlock> {
        let plain = crate::crypto::open_blob(sealing_key, sealed).ok()?;
        LedgerBlock::decode(&plain)
    }
}

impl Application for Ledger {
    fn apply(&mut self, op: &[u8]) -> AppOutput {
        self.pending.push(op.to_vec());
        let mut out = AppOutput {
            result: {
                let mut w = Writer::new();
                w.u8(0); // OK
                w.u64(self.next_index);
                w.finish()
            },
            blocks: Vec::new(),
        };
        if self.pending.len() == BLOCK_SIZE {
            let ops = std::mem::take(&mut self.pending);
            let block = LedgerBlock::build(self.next_index, self.head, ops);
            self.head = block.digest;
            self.next_index += 1;
            let sealed = seal_blob(
                &self.sealing_key,
                self.seal_role,
                self.seal_counter,
                &block.encode(),
            );
            self.seal_counter += 1;
            out.blocks.push((block.index, sealed));
            self.unacked.insert(block.index, block);
        }
        out
    }

    fn digest(&self) -> Digest {
        let mut w = Writer::new();
        w.digest(&self.head);
        w.u64(self.next_index);
        w.list(&self.pending, |w, op| w.bytes(op));
        Digest::of(w.as_slice())
    }

    fn snapshot(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.digest(&self.head);
        w.u64(self.next_index);
        w.list(&self.pending, |w, op| w.bytes(op));
        w.finish()
    }

    fn restore(&mut self, blob: &[u8]) -> Result<(), AppError> {
        let mut r = Reader::new(blob);
        let head = r.digest().map_err(|_| AppError::BadSnapshot)?;
        let next_index = r.u64().map_err(|_| AppError::BadSnapshot)?;
        let pending = r.list(|r| r.bytes()).map_err(|_| AppError::BadSnapshot)?;
        r.expect_end().map_err(|_| AppError::BadSnapshot)?;
        self.head = head;
        self.next_index = next_index;
        self.pending = pending;
        self.unacked.clear();
        Ok(())
    }

    fn fresh(&self) -> Box<dyn Application> {
        Box::new(Ledger::new(self.sealing_key, self.seal_role))
    }

    fn ack_persist(&mut self, index: u64) {
        self.unacked.remove(&index);
    }

    fn pending_persists(&self) -> usize {
        self.unacked.len()
    }

    fn name(&self) -> &'static str {
        "ledger"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger() -> Ledger {
        Ledger::new([9u8; 32], 0)
    }

    #[test]
    fn five_requests_seal_one_block() {
        let mut l = ledger();
        let mut blocks = Vec::new();
        for i in 0..5u8 {
            blocks.extend(l.apply(&[i]).blocks);
        }
        assert_eq!(blocks.len(), 1);
        assert_eq!(l.blocks_sealed(), 1);
    }

    #[test]
    fn four_requests_seal_nothing() {
        let mut l = ledger();
        let mut blocks = Vec::new();
        for i in 0..4u8 {
            blocks.extend(l.apply(&[i]).blocks);
        }
        assert!(blocks.is_empty());
    }

    #[test]
    fn two_hundred_requests_yield_forty_blocks() {
        let mut l = ledger();
        let mut count = 0;
        for i in 0..200u32 {
            count += l.apply(&i.to_be_bytes()).blocks.len();
        }
        assert_eq!(count, 40);
    }

    #[test]
    fn chain_links_verify() {
        let key = [9u8; 32];
        let mut l = Ledger::new(key, 0);
        let mut sealed_blocks = Vec::new();
        for i in 0..25u32 {
            sealed_blocks.extend(l.apply(&i.to_be_bytes()).blocks);
        }
        let blocks: Vec<LedgerBlock> = sealed_blocks
            .iter()
            .map(|(_, sealed)| Ledger::open_block(&key, sealed).unwrap())
            .collect();
        assert_eq!(blocks.len(), 5);
        assert!(verify_chain(&blocks));

        // A mutated sealed block fails to open at all.
        let mut bad = sealed_blocks[0].1.clone();
        bad[20] ^= 1;
        assert!(Ledger::open_block(&key, &bad).is_none());
    }

    #[test]
    fn unacked_blocks_held_until_ack() {
        let mut l = ledger();
        for i in 0..10u8 {
            l.apply(&[i]);
        }
        assert_eq!(l.pending_persists(), 2);
        l.ack_persist(0);
        assert_eq!(l.pending_persists(), 1);
    }

    #[test]
    fn snapshot_restore_identity() {
        let mut l = ledger();
        for i in 0..7u8 {
            l.apply(&[i]);
        }
        let snap = l.snapshot();
        let mut other = ledger();
        other.restore(&snap).unwrap();
        assert_eq!(l.digest(), other.digest());
    }
}
