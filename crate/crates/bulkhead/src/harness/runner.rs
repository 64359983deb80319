//! Scenario execution: builds the cluster, drives the deterministic event
//! loop to quiescence or the tick budget, and collects the trace.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::faults::{FaultSwitch, FaultyCompartment};
use super::scenario::{FaultBehavior, FaultTarget, Scenario, CANARY};
use crate::app::AppKind;
use crate::broker::{Broker, BrokerCounters, BrokerInput, EnvPolicy};
use crate::client::{Client, ClientInput};
use crate::compartment::{Compartment, Confirmation, Execution, Preparation};
use crate::config::{ClientId, CompartmentKind, SeqNo};
use crate::crypto::{AttestPolicy, ClusterKeys};
use crate::harness::kvs_workload_op;
use crate::trace::{Trace, TraceEvent};
use crate::transport::sim::{SendOutcome, SimNet};
use crate::transport::{Addr, Frame};

#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub ticks: u64,
    pub completed: u64,
    pub failed: u64,
    pub setup_failures: u64,
    pub total_ecalls: u64,
    pub persist_blocks: u64,
    pub persist_snapshots: u64,
    pub last_exec: Vec<SeqNo>,
    pub latencies: Vec<u64>,
    pub hit_budget: bool,
}

pub struct RunResult {
    pub trace: Trace,
    pub stats: RunStats,
    pub counters: Vec<BrokerCounters>,
    /// Secrets known at bootstrap plus client session keys, for the
    /// non-exfiltration scan.
    pub secrets: Vec<Vec<u8>>,
}

enum Payload {
    Deliver { from: Addr, frame: Frame },
    Wake,
}

/// Execute a scenario to quiescence or the tick budget.
pub fn run(scenario: &Scenario) -> RunResult {
    run_with_options(scenario, true)
}

/// Trace collection can be disabled for large benchmark workloads.
pub fn run_with_options(scenario: &Scenario, trace_enabled: bool) -> RunResult {
    let cfg = scenario.cluster.clone();
    cfg.validate().expect("scenario cluster config");
    let client_ids = scenario.client_ids();
    let keys = ClusterKeys::bootstrap(scenario.seed, cfg.n, &client_ids);

    let mut switches: Vec<FaultSwitch> = Vec::new();
    let mut brokers: Vec<Broker> = Vec::new();
    for replica in cfg.replicas() {
        let mut compartments: BTreeMap<CompartmentKind, Box<dyn Compartment>> = BTreeMap::new();
        for kind in CompartmentKind::ALL {
            let id = crate::config::EnclaveId::new(replica, kind);
            let reject = scenario.attest_reject.iter().any(|r| {
                r.replica == replica && r.kind == kind
            });
            let policy = AttestPolicy {
                force_reject: reject,
            };
            let honest: Box<dyn Compartment> = match kind {
                CompartmentKind::Preparation => Box::new(
                    Preparation::new(keys.enclave_keys(id), keys.registry.clone(), cfg.clone())
                        .with_attest_policy(policy),
                ),
                CompartmentKind::Confirmation => Box::new(Confirmation::new(
                    keys.enclave_keys(id),
                    keys.registry.clone(),
                    cfg.clone(),
                )),
                CompartmentKind::Execution => Box::new(
                    Execution::new(
                        keys.enclave_keys(id),
                        keys.registry.clone(),
                        cfg.clone(),
                        keys.exec_sealing,
                        scenario.app.build(keys.exec_sealing, replica),
                    )
                    .with_attest_policy(policy),
                ),
            };
            // Wrap if a fault targets this enclave.
            let fault = scenario.faults.iter().find(|f| {
                matches!(f.target, FaultTarget::Enclave { replica: r, kind: k }
                    if r == replica && k == kind)
            });
            let boxed: Box<dyn Compartment> = match fault {
                Some(f) => {
                    let switch = FaultSwitch::new(f.from, f.to);
                    switches.push(switch.clone());
                    Box::new(FaultyCompartment::new(
                        honest,
                        f.behavior.clone(),
                        switch,
                        keys.enclave_keys(id),
                        keys.registry.clone(),
                        cfg.clone(),
                    ))
                }
                None => honest,
            };
            compartments.insert(kind, boxed);
        }
        let exec = compartments.remove(&CompartmentKind::Execution).unwrap();
        let conf = compartments.remove(&CompartmentKind::Confirmation).unwrap();
        let prep = compartments.remove(&CompartmentKind::Preparation).unwrap();
        let mut broker = Broker::new(replica, cfg.clone(), scenario.seed, prep, conf, exec);
        broker.set_trace_enabled(trace_enabled);

        for f in &scenario.faults {
            match (&f.target, &f.behavior) {
                (FaultTarget::Environment { replica: r }, FaultBehavior::CorruptEnv { policy })
                    if *r == replica =>
                {
                    broker.add_policy(policy.clone(), f.from, f.to);
                }
                (FaultTarget::Environment { replica: r }, FaultBehavior::Crash) if *r == replica => {
                    broker.add_policy(EnvPolicy::crashed(), f.from, f.to);
                }
                // A byzantine enclave corrupts its environment too: the
                // replica's broker picks up a mild misbehavior policy for
                // the fault's window (reordering and replay, but liveness
                // preserving).
                (FaultTarget::Enclave { replica: r, .. }, behavior) if *r == replica => {
                    if !matches!(behavior, FaultBehavior::CorruptEnv { .. }) {
                        broker.add_policy(
                            EnvPolicy {
                                duplicate: 0.05,
                                reorder: 0.10,
                                replay: 0.05,
                                ..EnvPolicy::default()
                            },
                            f.from,
                            f.to,
                        );
                    }
                }
                _ => {}
            }
        }
        brokers.push(broker);
    }

    let mut clients: BTreeMap<ClientId, Client> = BTreeMap::new();
    for (index, &id) in client_ids.iter().enumerate() {
        let ops = generate_ops(scenario, index as u32);
        let mut client = Client::new(
            id,
            cfg.clone(),
            keys.client_keys(id),
            keys.registry.clone(),
            scenario.seed,
            ops,
            scenario.workload.outstanding as usize,
        );
        if scenario
            .workload
            .unencrypted_clients
            .contains(&(index as u32))
        {
            client.disable_sealing();
        }
        clients.insert(id, client);
    }

    let mut secrets = keys.secret_material(&client_ids);
    for client in clients.values() {
        secrets.push(client_session_secret(client));
    }

    let mut net = SimNet::new(scenario.seed, scenario.net.clone());
    let mut trace = Trace::default();
    let mut queue: BTreeMap<(u64, u64), (Addr, Payload)> = BTreeMap::new();
    let mut seq: u64 = 0;
    let mut deliveries_in_flight: u64 = 0;

    for &id in &client_ids {
        queue.insert((1, seq), (Addr::Client(id), Payload::Wake));
        seq += 1;
    }

    let mut clock: u64 = 0;
    let mut hit_budget = false;
    while let Some(((at, _), (addr, payload))) = queue.pop_first() {
        if at > scenario.tick_budget {
            hit_budget = true;
            break;
        }
        clock = at;
        for sw in &switches {
            sw.update(clock);
        }
        if matches!(payload, Payload::Deliver { .. }) {
            deliveries_in_flight -= 1;
        }

        let (sends, wake_at, records) = match addr {
            Addr::Replica(r) => {
                let input = match payload {
                    Payload::Deliver { from, frame } => BrokerInput::Net { from, frame },
                    Payload::Wake => BrokerInput::Wake,
                };
                let out = brokers[r as usize].handle(input, clock);
                (out.sends, out.wake_at, out.trace)
            }
            Addr::Client(c) => {
                let input = match payload {
                    Payload::Deliver { from, frame } => ClientInput::Net { from, frame },
                    Payload::Wake => ClientInput::Wake,
                };
                let out = clients.get_mut(&c).unwrap().handle(input, clock);
                (out.sends, out.wake_at, out.trace)
            }
        };
        trace.records.extend(records);

        for (to, frame) in sends {
            match net.send(clock, addr, to) {
                SendOutcome::DeliverAt(t) => {
                    if trace_enabled {
                        trace.push(clock, TraceEvent::NetSend {
                            from: addr,
                            to,
                            bytes: frame.encode(),
                            summary: frame.summary(),
                        });
                    }
                    queue.insert((t.max(clock + 1), seq), (to, Payload::Deliver { from: addr, frame }));
                    seq += 1;
                    deliveries_in_flight += 1;
                }
                SendOutcome::Dropped(reason) => {
                    if trace_enabled {
                        trace.push(clock, TraceEvent::NetDrop {
                            from: addr,
                            to,
                            summary: frame.summary(),
                            reason: match reason {
                                crate::transport::sim::DropReason::Lossy => "lossy",
                                crate::transport::sim::DropReason::Partitioned => "partitioned",
                            },
                        });
                    }
                }
            }
        }
        if let Some(w) = wake_at {
            queue.insert((w.max(clock + 1), seq), (addr, Payload::Wake));
            seq += 1;
        }

        // Quiescence: every client finished and nothing is in flight.
        let all_done = clients.values().all(|c| c.is_done());
        if all_done && deliveries_in_flight == 0 {
            break;
        }
    }

    // Final-state dumps for the confidentiality scan.
    if trace_enabled {
        for broker in &brokers {
            for (enclave, blobs) in broker.compartment_scan() {
                trace.push(clock, TraceEvent::StateScan {
                    owner: enclave.to_string(),
                    blobs,
                });
            }
            trace.push(clock, TraceEvent::StateScan {
                owner: format!("r{}/env", broker.replica()),
                blobs: broker.untrusted_blobs(),
            });
        }
    }

    let mut stats = RunStats {
        ticks: clock,
        hit_budget,
        ..RunStats::default()
    };
    for client in clients.values() {
        stats.completed += client.completed;
        stats.failed += client.failed;
        stats.setup_failures += u64::from(client.setup_failed);
        stats.latencies.extend(client.latencies.iter().copied());
    }
    let mut counters = Vec::new();
    for broker in &brokers {
        let c = broker.counters().clone();
        stats.total_ecalls += c.total_ecalls();
        stats.persist_blocks += c.persist_blocks;
        stats.persist_snapshots += c.persist_snapshots;
        stats
            .last_exec
            .push(broker.compartment(CompartmentKind::Execution).status().last_exec.unwrap_or(0));
        counters.push(c);
    }

    RunResult {
        trace,
        stats,
        counters,
        secrets,
    }
}

fn client_session_secret(client: &Client) -> Vec<u8> {
    client.session_secret().to_vec()
}

/// Deterministic per-client operation stream.
pub fn generate_ops(scenario: &Scenario, client_index: u32) -> Vec<Vec<u8>> {
    let w = &scenario.workload;
    let mut rng =
        ChaCha8Rng::seed_from_u64(scenario.seed ^ (0x776f_726b_0000 + client_index as u64));
    let mut ops = Vec::with_capacity(w.ops_per_client as usize);
    for op_no in 0..w.ops_per_client {
        let op = match scenario.app {
            AppKind::Kvs => kvs_workload_op(w, &mut rng, client_index, op_no),
            AppKind::Ledger => {
                let mut payload = CANARY.to_vec();
                payload.push(client_index as u8);
                payload.extend_from_slice(&op_no.to_be_bytes());
                payload.resize(w.payload_size.max(CANARY.len()), 0x5A);
                payload
            }
        };
        ops.push(op);
    }
    let _ = rng.gen::<u64>();
    ops
}
