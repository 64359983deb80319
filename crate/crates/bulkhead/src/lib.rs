//! Compartmentalized byzantine fault-tolerant replication.
//!
//! A PBFT-style protocol split per replica into three isolated compartments
//! — Preparation, Confirmation, Execution — each holding its own keys and
//! state and talking only through authenticated messages relayed by an
//! untrusted per-replica broker. Safety survives byzantine environments on
//! every replica and up to `f` faulty enclaves of each compartment type;
//! client operations and results stay confidential to the Execution
//! compartments and the clients themselves.
//!
//! The crate ships a deterministic simulated network, a scenario-driven
//! fault-injection harness with safety/linearizability/confidentiality
//! checkers, a real TCP transport, and two applications (a key-value store
//! and a block ledger). Start with the runnable examples:
//!
//! ```bash
//! cargo run --example kvs_cluster
//! cargo run --example fault_injection
//! cargo run --example view_change
//! ```
//!
//! The crate-level API surfaces the same building blocks the examples use:
//! [`harness::Scenario`] describes a run, [`harness::run`] executes it into
//! a [`harness::Trace`], and the checkers in [`harness::checkers`] decide
//! whether the run upheld the protocol's guarantees.

pub mod app;
pub mod broker;
pub mod certificate;
pub mod client;
pub mod compartment;
pub mod config;
pub mod crypto;
pub mod digest;
pub mod harness;
pub mod messages;
pub mod trace;
pub mod transport;
pub mod wire;

pub use config::{ClientId, CompartmentKind, Config, EnclaveId, ReplicaId, SeqNo, View};
pub use digest::Digest;
