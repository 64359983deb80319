//! The enclave boundary.
//!
//! A compartment is a sequential state machine: the broker feeds it one
//! event at a time and collects an [`Effects`] value — outbound messages for
//! the untrusted out log, persistence blobs, and evidence for the harness.
//! There are no other side effects, which is what makes byzantine wrappers
//! and trace capture exact.

mod confirmation;
mod execution;
mod new_view;
mod preparation;

pub use confirmation::Confirmation;
pub use execution::Execution;
pub use new_view::{compute_new_view, NewViewPlan};
pub use preparation::Preparation;

use crate::config::{ClientId, CompartmentKind, ReplicaId, SeqNo, View};
use crate::crypto::{AttestError, AttestOffer};
use crate::digest::Digest;
use crate::messages::{Message, Request};

/// Events delivered into an enclave by its broker (ecalls).
#[derive(Debug, Clone)]
pub enum EnclaveEvent {
    /// A batch of client requests (Preparation, handler for request intake).
    RequestBatch(Vec<Request>),
    /// Any routed protocol message.
    Protocol(Message),
    /// The environment suspects the primary of `suspected_view` (timers are
    /// untrusted; the enclave only checks the trigger names its own view).
    ViewChangeTrigger { suspected_view: View },
    /// Sealed snapshot bytes fetched for state transfer (Execution).
    SnapshotData { n: SeqNo, sealed: Vec<u8> },
    /// Stub attestation handshake from a client.
    SessionInstall(AttestOffer),
    /// The environment stored a persisted block; the enclave may release it.
    PersistAck { index: u64 },
}

impl EnclaveEvent {
    pub fn summary(&self) -> String {
        match self {
            EnclaveEvent::RequestBatch(b) => format!("RequestBatch |{}|", b.len()),
            EnclaveEvent::Protocol(m) => m.summary(),
            EnclaveEvent::ViewChangeTrigger { suspected_view } => {
                format!("ViewChangeTrigger v={suspected_view}")
            }
            EnclaveEvent::SnapshotData { n, .. } => format!("SnapshotData n={n}"),
            EnclaveEvent::SessionInstall(o) => {
                format!("SessionInstall c={} -> {}", o.client, o.target)
            }
            EnclaveEvent::PersistAck { index } => format!("PersistAck {index}"),
        }
    }
}

/// Where an outbound message should go. Broadcast includes local loopback,
/// which is how sibling compartments on the same replica receive it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dest {
    AllReplicas,
    Replica(ReplicaId),
    Client(ClientId),
}

#[derive(Debug, Clone)]
pub struct Outbound {
    pub dest: Dest,
    pub msg: Message,
}

/// Blobs the environment must store on the enclave's behalf; always sealed.
#[derive(Debug, Clone)]
pub enum PersistEffect {
    LedgerBlock { index: u64, sealed: Vec<u8> },
    Snapshot { n: SeqNo, sealed: Vec<u8> },
}

/// Observations of byzantine behavior, exported to the harness rather than
/// acted on in-protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Evidence {
    /// Two PrePrepares (or a PrePrepare conflicting with an own Prepare) for
    /// the same slot with different digests.
    Equivocation {
        v: View,
        n: SeqNo,
        first: Digest,
        second: Digest,
    },
    /// A sender signed two conflicting messages for one slot.
    ConflictingSender {
        replica: ReplicaId,
        v: View,
        n: SeqNo,
    },
    /// Two complete certificates for one slot with different digests.
    CertificateConflict {
        v: View,
        n: SeqNo,
        d1: Digest,
        d2: Digest,
    },
    /// A NewView that failed re-validation.
    InvalidNewView { v: View, reason: String },
    /// A fetched snapshot did not match the certified digest.
    SnapshotMismatch { n: SeqNo },
}

impl std::fmt::Display for Evidence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Evidence::Equivocation { v, n, first, second } => {
                write!(f, "equivocation v={v} n={n} {first}!={second}")
            }
            Evidence::ConflictingSender { replica, v, n } => {
                write!(f, "conflicting-sender r{replica} v={v} n={n}")
            }
            Evidence::CertificateConflict { v, n, d1, d2 } => {
                write!(f, "certificate-conflict v={v} n={n} {d1}!={d2}")
            }
            Evidence::InvalidNewView { v, reason } => {
                write!(f, "invalid-newview v={v}: {reason}")
            }
            Evidence::SnapshotMismatch { n } => write!(f, "snapshot-mismatch n={n}"),
        }
    }
}

/// Everything a handler produced; the broker drains this (ocalls).
#[derive(Debug, Default)]
pub struct Effects {
    pub out: Vec<Outbound>,
    pub persists: Vec<PersistEffect>,
    pub evidence: Vec<Evidence>,
    /// The window is full: the environment should buffer and retry the batch.
    pub backpressure: bool,
    /// Ask the environment to locate sealed snapshot bytes for `(n, digest)`.
    pub fetch_snapshot: Option<(SeqNo, Digest)>,
    /// Sequences applied to the application this call (Execution only).
    pub executed: Vec<(SeqNo, Digest)>,
    /// Outcome of a session-install handshake, relayed back to the client.
    pub attest_response: Option<(ClientId, Result<(), AttestError>)>,
}

impl Effects {
    pub fn none() -> Self {
        Effects::default()
    }

    pub fn broadcast(&mut self, msg: Message) {
        self.out.push(Outbound {
            dest: Dest::AllReplicas,
            msg,
        });
    }

    pub fn to_replica(&mut self, replica: ReplicaId, msg: Message) {
        self.out.push(Outbound {
            dest: Dest::Replica(replica),
            msg,
        });
    }

    pub fn to_client(&mut self, client: ClientId, msg: Message) {
        self.out.push(Outbound {
            dest: Dest::Client(client),
            msg,
        });
    }

    pub fn merge(&mut self, mut other: Effects) {
        self.out.extend(other.out);
        self.persists.extend(other.persists);
        self.evidence.extend(other.evidence);
        self.backpressure |= other.backpressure;
        self.fetch_snapshot = other.fetch_snapshot.or(self.fetch_snapshot);
        self.executed.extend(other.executed);
        self.attest_response = other.attest_response.take().or_else(|| self.attest_response.take());
    }
}

/// Read-only facts about an enclave, recorded in traces after every ecall.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompartmentStatus {
    pub view: View,
    pub low_watermark: SeqNo,
    pub log_entries: usize,
    pub last_exec: Option<SeqNo>,
}

/// The enclave boundary contract. One event in, one `Effects` out; a single
/// sequential execution context per instance — the broker serializes
/// deliveries.
pub trait Compartment: Send {
    fn kind(&self) -> CompartmentKind;
    fn replica(&self) -> ReplicaId;
    fn handle(&mut self, event: EnclaveEvent) -> Effects;
    fn status(&self) -> CompartmentStatus;
    /// Feed every byte-string held in enclave state to `sink`; the
    /// confidentiality checker scans these for plaintext canaries in
    /// non-Execution compartments.
    fn scan_state(&self, sink: &mut dyn FnMut(&[u8]));
    /// Drop all state, keeping keys and configuration. Models an enclave
    /// that lost its input log and restarts (amnesia fault experiments).
    fn amnesia_reset(&mut self);
}
