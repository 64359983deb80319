//! Pluggable deterministic state machines hosted by the Execution
//! compartment.

mod kvs;
mod ledger;

pub use kvs::{KvStore, KvsOp, KvsResult};
pub use ledger::{verify_chain, Ledger, LedgerBlock, BLOCK_SIZE};

use thiserror::Error;

use crate::digest::Digest;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("snapshot blob is malformed")]
    BadSnapshot,
}

/// What one application step produced: the client-visible result plus any
/// sealed blocks that must be persisted through the enclave boundary.
#[derive(Debug, Default)]
pub struct AppOutput {
    pub result: Vec<u8>,
    /// `(block index, sealed bytes)` persistence effects.
    pub blocks: Vec<(u64, Vec<u8>)>,
}

/// Result bytes for an operation that was corrupted or unparseable and was
/// therefore executed as a no-op.
pub fn noop_result() -> AppOutput {
    AppOutput {
        result: b"NOOP".to_vec(),
        blocks: Vec::new(),
    }
}

/// A deterministic application. `apply` must be a pure function of
/// (state, op); `digest` must be equal across replicas with equal histories;
/// `restore(snapshot())` must reproduce the state exactly.
pub trait Application: Send {
    fn apply(&mut self, op: &[u8]) -> AppOutput;
    fn digest(&self) -> Digest;
    fn snapshot(&self) -> Vec<u8>;
    fn restore(&mut self, blob: &[u8]) -> Result<(), AppError>;
    /// A fresh instance with the same configuration but empty state.
    fn fresh(&self) -> Box<dyn Application>;
    /// Blocks emitted but not yet acknowledged by the environment.
    fn ack_persist(&mut self, _index: u64) {}
    fn pending_persists(&self) -> usize {
        0
    }
    fn name(&self) -> &'static str;
}

/// Which application a node runs; selectable on the CLI and in scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AppKind {
    Kvs,
    Ledger,
}

impl AppKind {
    pub fn build(self, sealing_key: [u8; 32], seal_role: u32) -> Box<dyn Application> {
        match self {
            AppKind::Kvs => Box::new(KvStore::new()),
            AppKind::Ledger => Box::new(Ledger::new(sealing_key, seal_role)),
        }
    }
}

impl std::str::FromStr for AppKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kvs" => Ok(AppKind::Kvs),
            "ledger" => Ok(AppKind::Ledger),
            other => Err(format!("unknown app {other:?} (expected kvs or ledger)")),
        }
    }
}
