//! Declarative, seed-replayable scenario descriptions.
//!
//! A scenario fixes the topology, workload, network policy and injected
//! faults. Scenario files are TOML; the schema is documented in
//! `docs/scenario-format.md`.

use serde::{Deserialize, Serialize};

use crate::app::AppKind;
use crate::broker::EnvPolicy;
use crate::config::{ClientId, CompartmentKind, Config, ReplicaId};
use crate::transport::sim::NetPolicy;

/// Marker embedded in every workload payload; the confidentiality checker
/// scans untrusted bytes for it. Eight high-entropy bytes: a chance hit in
/// ciphertext is negligible.
pub const CANARY: [u8; 8] = [0xC4, 0x11, 0xA2, 0x09, 0xF3, 0x5E, 0xD7, 0x48];

/// First client id; clients are numbered upward from here.
pub const CLIENT_BASE: ClientId = 100;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cluster")]
    pub cluster: Config,
    #[serde(default = "default_app")]
    pub app: AppKind,
    pub workload: Workload,
    #[serde(default)]
    pub net: NetPolicy,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    /// Enclaves whose attestation stub refuses every handshake.
    #[serde(default)]
    pub attest_reject: Vec<AttestReject>,
    #[serde(default = "default_budget")]
    pub tick_budget: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestReject {
    pub replica: ReplicaId,
    pub kind: CompartmentKind,
}

fn default_cluster() -> Config {
    Config::for_faults(1)
}

fn default_app() -> AppKind {
    AppKind::Kvs
}

fn default_budget() -> u64 {
    2_000_000
}

impl Scenario {
    pub fn new(name: &str, workload: Workload) -> Self {
        Scenario {
            name: name.to_string(),
            seed: 0,
            cluster: default_cluster(),
            app: default_app(),
            workload,
            net: NetPolicy::default(),
            faults: Vec::new(),
            attest_reject: Vec::new(),
            tick_budget: default_budget(),
        }
    }

    pub fn client_ids(&self) -> Vec<ClientId> {
        (0..self.workload.clients as u64)
            .map(|i| CLIENT_BASE + i)
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Enclaves the scenario leaves honest, per compartment kind.
    pub fn correct_replicas(&self, kind: CompartmentKind) -> std::collections::BTreeSet<ReplicaId> {
        let mut set: std::collections::BTreeSet<ReplicaId> = self.cluster.replicas().collect();
        for f in &self.faults {
            if let FaultTarget::Enclave { replica, kind: k } = f.target {
                if k == kind {
                    set.remove(&replica);
                }
            }
        }
        set
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Workload {
    #[serde(default = "one")]
    pub clients: u32,
    pub ops_per_client: u32,
    #[serde(default = "one")]
    pub outstanding: u32,
    /// Value payload size in bytes (the canary is embedded within it).
    #[serde(default = "default_payload")]
    pub payload_size: usize,
    /// Fraction of PUTs in the op mix; the rest are GETs.
    #[serde(default = "default_put_ratio")]
    pub put_ratio: f64,
    #[serde(default = "default_keyspace")]
    pub keyspace: u32,
    /// Client indices that skip sealing (confidentiality control runs).
    #[serde(default)]
    pub unencrypted_clients: Vec<u32>,
}

fn one() -> u32 {
    1
}

fn default_payload() -> usize {
    10
}

fn default_put_ratio() -> f64 {
    0.5
}

fn default_keyspace() -> u32 {
    16
}

impl Workload {
    pub fn kvs(clients: u32, ops_per_client: u32) -> Self {
        Workload {
            clients,
            ops_per_client,
            outstanding: 1,
            payload_size: default_payload(),
            put_ratio: default_put_ratio(),
            keyspace: default_keyspace(),
            unencrypted_clients: Vec::new(),
        }
    }

    pub fn total_ops(&self) -> u64 {
        self.clients as u64 * self.ops_per_client as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "at", rename_all = "snake_case")]
pub enum FaultTarget {
    Enclave {
        replica: ReplicaId,
        kind: CompartmentKind,
    },
    Environment {
        replica: ReplicaId,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultBehavior {
    /// Stop doing anything.
    Crash,
    /// Keep state moving but never emit.
    Mute,
    /// As primary, issue conflicting PrePrepares for the same slot to
    /// different replicas; as backup, emit conflicting Prepares.
    Equivocate,
    /// Lose the input log at activation and keep going: resends diverge.
    Amnesia,
    /// Emit Commits without holding a prepare certificate.
    LieCommit,
    /// Hold every output back for a few steps before releasing it.
    DelayAll,
    /// Replace reply payloads with validly-authenticated garbage.
    GarbageReplies,
    /// Send one honest NewView to most replicas and a NewView with forged
    /// PrePrepares to the victim.
    ForgeNewView { victim: ReplicaId },
    /// Coordinated digest split: the listed replicas are fed one variant of
    /// every slot, everyone else the other (over-threshold control).
    SplitBrain { dark: Vec<ReplicaId> },
    /// Byzantine environment knobs (valid only for Environment targets).
    CorruptEnv { policy: EnvPolicy },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultSpec {
    pub target: FaultTarget,
    pub behavior: FaultBehavior,
    /// Activation window in ticks.
    #[serde(default)]
    pub from: u64,
    #[serde(default = "forever")]
    pub to: u64,
}

/// "Active forever"; capped to i64 so scenario files stay valid TOML.
pub const FOREVER: u64 = i64::MAX as u64;

fn forever() -> u64 {
    FOREVER
}

impl FaultSpec {
    pub fn always(target: FaultTarget, behavior: FaultBehavior) -> Self {
        FaultSpec {
            target,
            behavior,
            from: 0,
            to: FOREVER,
        }
    }
}
