//! Client sessions: AEAD request/reply confidentiality and per-replica MACs.
//!
//! One symmetric key `s_enc` per client is shared with the Execution
//! compartment type; the client and each replica's Execution enclave seal
//! under it with disjoint nonce spaces (the sealer role is baked into the
//! nonce prefix). Per-replica MAC keys are shared with the Preparation and
//! Execution enclaves of that replica.

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use thiserror::Error;

use crate::config::ReplicaId;

pub const MAC_LEN: usize = 32;
const NONCE_LEN: usize = 12;

/// Nonce-space role for client-side seals; replica ids occupy the rest.
const ROLE_CLIENT: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SealError {
    /// AEAD integrity failure: the ciphertext was mutated, truncated, or
    /// sealed under a different key.
    #[error("ciphertext failed authentication")]
    Tampered,
}

fn nonce_bytes(role: u32, counter: u64) -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    n[..4].copy_from_slice(&role.to_be_bytes());
    n[4..].copy_from_slice(&counter.to_be_bytes());
    n
}

fn seal(key: &[u8; 32], role: u32, counter: u64, plaintext: &[u8]) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key));
    let nonce = nonce_bytes(role, counter);
    let mut out = nonce.to_vec();
    let ct = cipher
        .encrypt(Nonce::from_slice(&nonce), plaintext)
        .expect("chacha20poly1305 encryption is infallible");
    out.extend_from_slice(&ct);
    out
}

fn open(key: &[u8; 32], ciphertext: &[u8]) -> Result<Vec<u8>, SealError> {
    if ciphertext.len() < NONCE_LEN {
        return Err(SealError::Tampered);
    }
    let (nonce, ct) = ciphertext.split_at(NONCE_LEN);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key));
    cipher
        .decrypt(Nonce::from_slice(nonce), ct)
        .map_err(|_| SealError::Tampered)
}

/// Client-side sealing state: `s_enc` plus a monotone nonce counter.
pub struct ClientSealer {
    s_enc: [u8; 32],
    counter: u64,
}

impl ClientSealer {
    pub fn new(s_enc: [u8; 32]) -> Self {
        ClientSealer { s_enc, counter: 0 }
    }

    pub fn seal_op(&mut self, plaintext: &[u8]) -> Vec<u8> {
        let counter = self.counter;
        self.counter += 1;
        seal(&self.s_enc, ROLE_CLIENT, counter, plaintext)
    }

    pub fn open_result(&self, ciphertext: &[u8]) -> Result<Vec<u8>, SealError> {
        open(&self.s_enc, ciphertext)
    }

    pub(crate) fn s_enc(&self) -> [u8; 32] {
        self.s_enc
    }
}

/// Execution-enclave side of one client session.
pub struct ExecSession {
    pub mac_key: [u8; 32],
    s_enc: [u8; 32],
    reply_counter: u64,
}

impl ExecSession {
    pub fn new(mac_key: [u8; 32], s_enc: [u8; 32]) -> Self {
        ExecSession {
            mac_key,
            s_enc,
            reply_counter: 0,
        }
    }

    pub fn open_op(&self, ciphertext: &[u8]) -> Result<Vec<u8>, SealError> {
        open(&self.s_enc, ciphertext)
    }

    pub fn seal_result(&mut self, replica: ReplicaId, plaintext: &[u8]) -> Vec<u8> {
        let counter = self.reply_counter;
        self.reply_counter += 1;
        seal(&self.s_enc, replica, counter, plaintext)
    }
}

/// Free-function forms used where only the key is at hand.
pub fn seal_request(sealer: &mut ClientSealer, plaintext: &[u8]) -> Vec<u8> {
    sealer.seal_op(plaintext)
}

pub fn open_request(session: &ExecSession, ciphertext: &[u8]) -> Result<Vec<u8>, SealError> {
    session.open_op(ciphertext)
}

pub fn seal_reply(session: &mut ExecSession, replica: ReplicaId, plaintext: &[u8]) -> Vec<u8> {
    session.seal_result(replica, plaintext)
}

pub fn open_result(sealer: &ClientSealer, ciphertext: &[u8]) -> Result<Vec<u8>, SealError> {
    sealer.open_result(ciphertext)
}

/// Seal an arbitrary blob (snapshot, ledger block) under a compartment
/// sealing key. `role` must be unique per sealer sharing the key, so nonce
/// spaces stay disjoint.
pub fn seal_blob(key: &[u8; 32], role: u32, counter: u64, plaintext: &[u8]) -> Vec<u8> {
    seal(key, role, counter, plaintext)
}

pub fn open_blob(key: &[u8; 32], ciphertext: &[u8]) -> Result<Vec<u8>, SealError> {
    open(key, ciphertext)
}

pub fn reply_mac(mac_key: &[u8; 32], input: &[u8]) -> Vec<u8> {
    super::mac_tag(mac_key, input)
}

pub fn verify_reply_mac(mac_key: &[u8; 32], input: &[u8], tag: &[u8]) -> bool {
    super::mac_verify(mac_key, input, tag)
}
