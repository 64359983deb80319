//! Cluster configuration and compartment identities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a replica in `[0, n)`.
pub type ReplicaId = u32;
/// Client identifier.
pub type ClientId = u64;
/// View number. Monotone; selects the primary.
pub type View = u64;
/// Sequence number assigned by the ordering protocol.
pub type SeqNo = u64;

/// Client id reserved for no-op requests used to fill sequence gaps after a
/// view change.
pub const NOOP_CLIENT: ClientId = u64::MAX;

/// The three compartment types hosted by every replica.
///
/// Each runs in its own isolated context with its own key pair; they exchange
/// only authenticated messages through the untrusted broker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CompartmentKind {
    /// Request intake, PrePrepare/Prepare emission, NewView creation and
    /// validation.
    Preparation,
    /// Prepare-certificate collection, Commit and ViewChange emission.
    Confirmation,
    /// Ordered execution, replies, checkpoints; hosts the application and the
    /// only plaintext view of requests.
    Execution,
}

impl CompartmentKind {
    pub const ALL: [CompartmentKind; 3] = [
        CompartmentKind::Preparation,
        CompartmentKind::Confirmation,
        CompartmentKind::Execution,
    ];

    /// Domain-separation tag mixed into signed bytes, so a signature by one
    /// compartment type can never validate as another's.
    pub fn domain_tag(self) -> u8 {
        match self {
            CompartmentKind::Preparation => 0x10,
            CompartmentKind::Confirmation => 0x20,
            CompartmentKind::Execution => 0x30,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CompartmentKind::Preparation => "prep",
            CompartmentKind::Confirmation => "conf",
            CompartmentKind::Execution => "exec",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "prep" => Some(CompartmentKind::Preparation),
            "conf" => Some(CompartmentKind::Confirmation),
            "exec" => Some(CompartmentKind::Execution),
            _ => None,
        }
    }
}

impl std::fmt::Display for CompartmentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Globally unique enclave identity: `(replica, compartment kind)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EnclaveId {
    pub replica: ReplicaId,
    pub kind: CompartmentKind,
}

impl EnclaveId {
    pub fn new(replica: ReplicaId, kind: CompartmentKind) -> Self {
        EnclaveId { replica, kind }
    }
}

impl std::fmt::Display for EnclaveId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "r{}/{}", self.replica, self.kind)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("replica count {n} must equal 3f+1 = {expected} for f = {f}")]
    BadQuorumShape { n: u32, f: u32, expected: u32 },
    #[error("window {window} must be at least the checkpoint interval {interval}")]
    WindowTooSmall { window: u64, interval: u64 },
    #[error("checkpoint interval must be positive")]
    ZeroInterval,
    #[error("batch_max must be at least 1")]
    ZeroBatch,
}

/// Static cluster parameters, identical on every node.
///
/// Time-valued fields are in ticks on the simulated transport and in
/// milliseconds on TCP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Config {
    /// Replica count; must be `3f + 1`.
    pub n: u32,
    /// Fault threshold per compartment type.
    pub f: u32,
    /// Sequence numbers between checkpoints (`k`).
    pub checkpoint_interval: u64,
    /// Watermark window `W`; messages are accepted for `low < n <= low + W`.
    pub window: u64,
    /// Maximum requests per batch.
    pub batch_max: usize,
    /// Batch is closed after this long even if not full.
    pub batch_timeout: u64,
    /// Request timer; expiry triggers a view change.
    pub request_timeout: u64,
}

impl Config {
    /// Standard configuration for a given fault threshold.
    pub fn for_faults(f: u32) -> Self {
        Config {
            n: 3 * f + 1,
            f,
            checkpoint_interval: 100,
            window: 200,
            batch_max: 200,
            batch_timeout: 10,
            request_timeout: 600,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n != 3 * self.f + 1 {
            return Err(ConfigError::BadQuorumShape {
                n: self.n,
                f: self.f,
                expected: 3 * self.f + 1,
            });
        }
        if self.checkpoint_interval == 0 {
            return Err(ConfigError::ZeroInterval);
        }
        if self.window < self.checkpoint_interval {
            return Err(ConfigError::WindowTooSmall {
                window: self.window,
                interval: self.checkpoint_interval,
            });
        }
        if self.batch_max == 0 {
            return Err(ConfigError::ZeroBatch);
        }
        Ok(())
    }

    /// `2f + 1`, the size of every quorum in the protocol.
    pub fn quorum(&self) -> usize {
        2 * self.f as usize + 1
    }

    /// Primary of a view: plain rotation `v mod n`.
    pub fn primary_of(&self, v: View) -> ReplicaId {
        (v % self.n as u64) as ReplicaId
    }

    pub fn replicas(&self) -> impl Iterator<Item = ReplicaId> {
        0..self.n
    }
}

/// Window test shared by all compartments: `low < n <= low + W`.
pub fn in_window(n: SeqNo, low_watermark: SeqNo, window: u64) -> bool {
    n > low_watermark && n <= low_watermark + window
}

/// `in-wv`: the sequence is in the window and the view is current.
pub fn in_wv(v: View, n: SeqNo, current_view: View, low_watermark: SeqNo, window: u64) -> bool {
    v == current_view && in_window(n, low_watermark, window)
}
