//! The untrusted per-replica environment.
//!
//! The broker owns the three compartments, routes inbound messages to them
//! (ecalls), drains their out logs to the network (ocalls), batches client
//! requests, runs the view-change timers, and stores sealed blobs. None of
//! this is trusted: a broker can misbehave in every way short of forging
//! signatures, which is exactly what [`EnvPolicy`] injects. A corrupt broker
//! costs liveness, never safety.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compartment::{Compartment, Dest, EnclaveEvent, PersistEffect};
use crate::config::{ClientId, CompartmentKind, Config, EnclaveId, ReplicaId, SeqNo, View};
use crate::messages::{Message, Request};
use crate::trace::{meta_of, TraceEvent, TraceRecord};
use crate::transport::{Addr, Frame};

/// Misbehavior knobs for a byzantine environment. All decisions are drawn
/// from a seeded rng, so scenarios replay deterministically.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EnvPolicy {
    /// Replica is dead: nothing in, nothing out.
    #[serde(default)]
    pub crash: bool,
    /// Probability an inbound protocol message is dropped.
    #[serde(default)]
    pub drop_inbound: f64,
    /// Probability an out-log send is suppressed.
    #[serde(default)]
    pub drop_outbound: f64,
    /// Probability an inbound message is delivered twice.
    #[serde(default)]
    pub duplicate: f64,
    /// Probability a multi-compartment message reaches only a strict subset
    /// of its routing targets.
    #[serde(default)]
    pub selective_forward: f64,
    /// Probability an inbound message is deferred to a later handling step.
    #[serde(default)]
    pub reorder: f64,
    /// Probability a previously seen message is replayed alongside a new one.
    #[serde(default)]
    pub replay: f64,
    /// Never arm or fire view-change timers.
    #[serde(default)]
    pub stop_timers: bool,
}

impl EnvPolicy {
    pub fn hostile() -> Self {
        EnvPolicy {
            crash: false,
            drop_inbound: 0.05,
            drop_outbound: 0.05,
            duplicate: 0.1,
            selective_forward: 0.15,
            reorder: 0.2,
            replay: 0.1,
            stop_timers: true,
        }
    }

    pub fn crashed() -> Self {
        EnvPolicy {
            crash: true,
            ..EnvPolicy::default()
        }
    }

    fn is_honest(&self) -> bool {
        !self.crash
            && self.drop_inbound == 0.0
            && self.drop_outbound == 0.0
            && self.duplicate == 0.0
            && self.selective_forward == 0.0
            && self.reorder == 0.0
            && self.replay == 0.0
            && !self.stop_timers
    }
}

/// ecall/ocall counters, the measurement behind the batching-amortization
/// numbers.
#[derive(Debug, Clone, Default)]
pub struct BrokerCounters {
    pub ecalls: BTreeMap<CompartmentKind, u64>,
    /// Drains of a nonempty effects value (response collection ocalls).
    pub ocall_drains: u64,
    /// Output drains from the Execution enclave specifically.
    pub exec_output_ocalls: u64,
    /// Persisted ledger blocks.
    pub persist_blocks: u64,
    /// Persisted checkpoint snapshots.
    pub persist_snapshots: u64,
    pub dropped_malformed: u64,
}

impl BrokerCounters {
    pub fn total_ecalls(&self) -> u64 {
        self.ecalls.values().sum()
    }
}

pub enum BrokerInput {
    Net { from: Addr, frame: Frame },
    Wake,
}

#[derive(Default)]
pub struct BrokerOutput {
    pub sends: Vec<(Addr, Frame)>,
    pub wake_at: Option<u64>,
    pub trace: Vec<TraceRecord>,
}

impl BrokerOutput {
    fn want_wake(&mut self, at: u64) {
        self.wake_at = Some(self.wake_at.map_or(at, |w| w.min(at)));
    }
}

struct Timer {
    deadline: u64,
    backoff: u64,
}

pub struct Broker {
    replica: ReplicaId,
    cfg: Config,
    prep: Box<dyn Compartment>,
    conf: Box<dyn Compartment>,
    exec: Box<dyn Compartment>,

    rng: ChaCha8Rng,
    policy_schedule: Vec<(EnvPolicy, u64, u64)>,

    batch: Vec<Request>,
    batch_deadline: Option<u64>,
    pending_batches: VecDeque<Vec<Request>>,
    retry_deadline: Option<u64>,

    request_timers: BTreeMap<(ClientId, u64), Timer>,
    /// Views our own Confirmation enclave provably reached (it emitted a
    /// ViewChange or Commit there).
    conf_view_emitted: View,
    /// Optimistic belief including routed NewViews the enclave may have
    /// adopted silently.
    conf_view_hint: View,
    /// Alternate between the two guesses on consecutive triggers, so one
    /// poisoned hint cannot wedge suspicion forever.
    trigger_alternate: bool,
    vc_backoff: u64,
    vc_suppress_until: u64,

    /// Sealed ledger blocks, append-only; drained by node binaries into the
    /// per-replica block file.
    block_store: Vec<(u64, Vec<u8>)>,
    fresh_blocks: Vec<(u64, Vec<u8>)>,
    snapshot_store: BTreeMap<SeqNo, Vec<u8>>,

    replay_ring: VecDeque<Message>,
    deferred: Vec<Message>,

    counters: BrokerCounters,
    trace_enabled: bool,
}

impl Broker {
    pub fn new(
        replica: ReplicaId,
        cfg: Config,
        seed: u64,
        prep: Box<dyn Compartment>,
        conf: Box<dyn Compartment>,
        exec: Box<dyn Compartment>,
    ) -> Self {
        let request_timeout = cfg.request_timeout;
        Broker {
            replica,
            cfg,
            prep,
            conf,
            exec,
            rng: ChaCha8Rng::seed_from_u64(seed ^ (0xb20c_e200 + replica as u64)),
            policy_schedule: Vec::new(),
            batch: Vec::new(),
            batch_deadline: None,
            pending_batches: VecDeque::new(),
            retry_deadline: None,
            request_timers: BTreeMap::new(),
            conf_view_emitted: 0,
            conf_view_hint: 0,
            trigger_alternate: false,
            vc_backoff: request_timeout,
            vc_suppress_until: 0,
            block_store: Vec::new(),
            fresh_blocks: Vec::new(),
            snapshot_store: BTreeMap::new(),
            replay_ring: VecDeque::new(),
            deferred: Vec::new(),
            counters: BrokerCounters::default(),
            trace_enabled: true,
        }
    }

    pub fn set_trace_enabled(&mut self, on: bool) {
        self.trace_enabled = on;
    }

    pub fn add_policy(&mut self, policy: EnvPolicy, from: u64, to: u64) {
        self.policy_schedule.push((policy, from, to));
    }

    pub fn replica(&self) -> ReplicaId {
        self.replica
    }

    pub fn counters(&self) -> &BrokerCounters {
        &self.counters
    }

    pub fn compartment(&self, kind: CompartmentKind) -> &dyn Compartment {
        match kind {
            CompartmentKind::Preparation => self.prep.as_ref(),
            CompartmentKind::Confirmation => self.conf.as_ref(),
            CompartmentKind::Execution => self.exec.as_ref(),
        }
    }

    /// Blocks persisted since the last call; node binaries append these to
    /// the replica's block file.
    pub fn take_fresh_blocks(&mut self) -> Vec<(u64, Vec<u8>)> {
        std::mem::take(&mut self.fresh_blocks)
    }

    pub fn block_store(&self) -> &[(u64, Vec<u8>)] {
        &self.block_store
    }

    /// Everything the untrusted side holds, for the non-exfiltration scan.
    pub fn untrusted_blobs(&self) -> Vec<Vec<u8>> {
        let mut blobs: Vec<Vec<u8>> = Vec::new();
        for r in &self.batch {
            blobs.push(r.encode());
        }
        for b in &self.pending_batches {
            for r in b {
                blobs.push(r.encode());
            }
        }
        for (_, sealed) in &self.block_store {
            blobs.push(sealed.clone());
        }
        for sealed in self.snapshot_store.values() {
            blobs.push(sealed.clone());
        }
        blobs
    }

    fn policy_at(&self, now: u64) -> EnvPolicy {
        for (p, from, to) in &self.policy_schedule {
            if now >= *from && now < *to {
                return p.clone();
            }
        }
        EnvPolicy::default()
    }

    pub fn handle(&mut self, input: BrokerInput, now: u64) -> BrokerOutput {
        let mut out = BrokerOutput::default();
        let policy = self.policy_at(now);
        if policy.crash {
            return out;
        }

        // Release anything a reordering policy deferred earlier.
        let deferred: Vec<Message> = std::mem::take(&mut self.deferred);
        for msg in deferred {
            self.route_protocol(msg, &policy, now, &mut out);
        }

        match input {
            BrokerInput::Net { from, frame } => self.on_net(from, frame, &policy, now, &mut out),
            BrokerInput::Wake => {}
        }
        self.on_timers(&policy, now, &mut out);
        out
    }

    fn on_net(
        &mut self,
        from: Addr,
        frame: Frame,
        policy: &EnvPolicy,
        now: u64,
        out: &mut BrokerOutput,
    ) {
        match frame {
            Frame::Protocol(bytes) => {
                let Ok(msg) = Message::decode(&bytes) else {
                    self.counters.dropped_malformed += 1;
                    self.trace(out, now, TraceEvent::EnvAction {
                        replica: self.replica,
                        action: "drop-malformed",
                        summary: format!("{}B from {from}", bytes.len()),
                    });
                    return;
                };
                if policy.drop_inbound > 0.0 && self.rng.gen_bool(policy.drop_inbound) {
                    self.trace(out, now, TraceEvent::EnvAction {
                        replica: self.replica,
                        action: "drop-inbound",
                        summary: msg.summary(),
                    });
                    return;
                }
                if policy.reorder > 0.0 && self.rng.gen_bool(policy.reorder) {
                    self.trace(out, now, TraceEvent::EnvAction {
                        replica: self.replica,
                        action: "defer",
                        summary: msg.summary(),
                    });
                    self.deferred.push(msg);
                    return;
                }
                let duplicate = policy.duplicate > 0.0 && self.rng.gen_bool(policy.duplicate);
                let replay = policy.replay > 0.0
                    && !self.replay_ring.is_empty()
                    && self.rng.gen_bool(policy.replay);
                if replay {
                    let idx = self.rng.gen_range(0..self.replay_ring.len());
                    let old = self.replay_ring[idx].clone();
                    self.trace(out, now, TraceEvent::EnvAction {
                        replica: self.replica,
                        action: "replay",
                        summary: old.summary(),
                    });
                    self.route_protocol(old, policy, now, out);
                }
                self.route_protocol(msg.clone(), policy, now, out);
                if duplicate {
                    self.trace(out, now, TraceEvent::EnvAction {
                        replica: self.replica,
                        action: "duplicate",
                        summary: msg.summary(),
                    });
                    self.route_protocol(msg.clone(), policy, now, out);
                }
                self.replay_ring.push_back(msg);
                if self.replay_ring.len() > 64 {
                    self.replay_ring.pop_front();
                }
            }
            Frame::Attest(offer) => {
                if offer.target.replica == self.replica {
                    let kind = offer.target.kind;
                    self.ecall(kind, EnclaveEvent::SessionInstall(offer), now, out);
                }
            }
            Frame::AttestResult { .. } | Frame::Hello { .. } => {} // not replica-bound
            Frame::SnapshotRequest { n } => {
                if let Some(sealed) = self.snapshot_store.get(&n).cloned() {
                    out.sends.push((from, Frame::SnapshotResponse { n, sealed }));
                }
            }
            Frame::SnapshotResponse { n, sealed } => {
                self.ecall(
                    CompartmentKind::Execution,
                    EnclaveEvent::SnapshotData { n, sealed },
                    now,
                    out,
                );
            }
        }
    }

    /// The routing table: which compartments see which message type. A
    /// NewView is forwarded to all compartments, and its embedded
    /// PrePrepares are additionally delivered to Confirmation and Execution,
    /// which do not look inside the NewView themselves.
    fn route_protocol(
        &mut self,
        msg: Message,
        policy: &EnvPolicy,
        now: u64,
        out: &mut BrokerOutput,
    ) {
        use CompartmentKind::*;
        match msg {
            Message::Request(req) => {
                if !policy.stop_timers
                    && !req.is_noop()
                    && !self.request_timers.contains_key(&(req.c, req.t))
                {
                    self.request_timers.insert(
                        (req.c, req.t),
                        Timer {
                            deadline: now + self.cfg.request_timeout,
                            backoff: self.cfg.request_timeout,
                        },
                    );
                }
                self.push_request(req, now, out);
            }
            Message::Reply(_) => {} // not replica-bound
            ref m @ Message::PrePrepare(_)
            | ref m @ Message::Checkpoint(_)
            | ref m @ Message::NewView(_) => {
                let targets = self.select_targets(&[Preparation, Confirmation, Execution], policy);
                if targets.len() < 3 {
                    self.trace(out, now, TraceEvent::EnvAction {
                        replica: self.replica,
                        action: "selective-forward",
                        summary: format!("{} -> {:?}", m.summary(), targets),
                    });
                }
                for kind in &targets {
                    self.ecall(*kind, EnclaveEvent::Protocol(m.clone()), now, out);
                }
                if let Message::NewView(nv) = m {
                    for pp in &nv.preprepares {
                        for kind in [Confirmation, Execution] {
                            if targets.contains(&kind) {
                                self.ecall(
                                    kind,
                                    EnclaveEvent::Protocol(Message::PrePrepare(pp.clone())),
                                    now,
                                    out,
                                );
                            }
                        }
                    }
                    // The enclaves may have adopted this view silently.
                    self.conf_view_hint = self.conf_view_hint.max(nv.v);
                }
            }
            m @ Message::Prepare(_) => {
                self.ecall(Confirmation, EnclaveEvent::Protocol(m), now, out);
            }
            m @ Message::Commit(_) => {
                self.ecall(Execution, EnclaveEvent::Protocol(m), now, out);
            }
            m @ Message::ViewChange(_) => {
                self.ecall(Preparation, EnclaveEvent::Protocol(m), now, out);
            }
        }
    }

    fn select_targets(
        &mut self,
        all: &[CompartmentKind],
        policy: &EnvPolicy,
    ) -> Vec<CompartmentKind> {
        if policy.selective_forward > 0.0 && self.rng.gen_bool(policy.selective_forward) {
            let keep: Vec<CompartmentKind> = all
                .iter()
                .copied()
                .filter(|_| self.rng.gen_bool(0.5))
                .collect();
            if !keep.is_empty() && keep.len() < all.len() {
                return keep;
            }
            // Degenerate draw: deliver to exactly one.
            let idx = self.rng.gen_range(0..all.len());
            return vec![all[idx]];
        }
        all.to_vec()
    }

    fn push_request(&mut self, req: Request, now: u64, out: &mut BrokerOutput) {
        self.batch.push(req);
        if self.batch.len() >= self.cfg.batch_max {
            self.close_batch(now, out);
        } else if self.batch_deadline.is_none() {
            let at = now + self.cfg.batch_timeout;
            self.batch_deadline = Some(at);
            out.want_wake(at);
        }
    }

    fn close_batch(&mut self, now: u64, out: &mut BrokerOutput) {
        if self.batch.is_empty() {
            return;
        }
        let batch: Vec<Request> = std::mem::take(&mut self.batch);
        self.batch_deadline = None;
        self.trace(out, now, TraceEvent::BatchClosed {
            replica: self.replica,
            size: batch.len(),
        });
        let backpressured = self.ecall(
            CompartmentKind::Preparation,
            EnclaveEvent::RequestBatch(batch.clone()),
            now,
            out,
        );
        if backpressured {
            self.pending_batches.push_back(batch);
            let at = now + self.cfg.batch_timeout.max(1) * 4;
            self.retry_deadline = Some(self.retry_deadline.map_or(at, |d: u64| d.min(at)));
            out.want_wake(self.retry_deadline.unwrap());
        }
    }

    fn on_timers(&mut self, policy: &EnvPolicy, now: u64, out: &mut BrokerOutput) {
        if let Some(d) = self.batch_deadline {
            if now >= d {
                self.close_batch(now, out);
            } else {
                out.want_wake(d);
            }
        }
        if let Some(d) = self.retry_deadline {
            if now >= d {
                self.retry_deadline = None;
                if let Some(batch) = self.pending_batches.pop_front() {
                    let backpressured = self.ecall(
                        CompartmentKind::Preparation,
                        EnclaveEvent::RequestBatch(batch.clone()),
                        now,
                        out,
                    );
                    if backpressured {
                        self.pending_batches.push_front(batch);
                    }
                }
                if !self.pending_batches.is_empty() {
                    let at = now + self.cfg.batch_timeout.max(1) * 4;
                    self.retry_deadline = Some(at);
                    out.want_wake(at);
                }
            } else {
                out.want_wake(d);
            }
        }
        if policy.stop_timers {
            return;
        }
        let mut fired: Vec<(ClientId, u64)> = Vec::new();
        for (key, timer) in &self.request_timers {
            if now >= timer.deadline {
                fired.push(*key);
            } else {
                out.want_wake(timer.deadline);
            }
        }
        if fired.is_empty() {
            return;
        }
        for key in fired {
            let timer = self.request_timers.get_mut(&key).unwrap();
            timer.backoff = timer.backoff.saturating_mul(2);
            timer.deadline = now + timer.backoff;
            out.want_wake(timer.deadline);
        }
        // At most one suspicion per backoff window, or view numbers run
        // away from the rest of the cluster.
        if now < self.vc_suppress_until {
            out.want_wake(self.vc_suppress_until);
            return;
        }
        let suspected = if self.trigger_alternate && self.conf_view_hint > self.conf_view_emitted
        {
            self.conf_view_hint
        } else {
            self.conf_view_emitted
        };
        self.trigger_alternate = !self.trigger_alternate;
        self.vc_suppress_until = now + self.vc_backoff;
        self.vc_backoff = self.vc_backoff.saturating_mul(2);
        self.trace(out, now, TraceEvent::ViewTrigger {
            replica: self.replica,
            suspected,
        });
        self.ecall(
            CompartmentKind::Confirmation,
            EnclaveEvent::ViewChangeTrigger {
                suspected_view: suspected,
            },
            now,
            out,
        );
    }

    /// Deliver one event into one enclave, then drain its effects. Local
    /// loopback deliveries are processed iteratively until quiescent.
    /// Returns whether the enclave reported backpressure.
    fn ecall(
        &mut self,
        kind: CompartmentKind,
        event: EnclaveEvent,
        now: u64,
        out: &mut BrokerOutput,
    ) -> bool {
        let mut pending: VecDeque<(CompartmentKind, EnclaveEvent)> = VecDeque::new();
        pending.push_back((kind, event));
        let mut first_backpressure = false;
        let mut first = true;
        while let Some((kind, event)) = pending.pop_front() {
            let policy = self.policy_at(now);
            let comp = match kind {
                CompartmentKind::Preparation => self.prep.as_mut(),
                CompartmentKind::Confirmation => self.conf.as_mut(),
                CompartmentKind::Execution => self.exec.as_mut(),
            };
            let event_summary = event.summary();
            let fx = comp.handle(event);
            let status = comp.status();
            *self.counters.ecalls.entry(kind).or_insert(0) += 1;
            let enclave = EnclaveId::new(self.replica, kind);
            let produced = fx.out.len() + fx.persists.len();
            self.trace(out, now, TraceEvent::Ecall {
                enclave,
                event: event_summary,
                outputs: produced,
                view: status.view,
                low_watermark: status.low_watermark,
                log_entries: status.log_entries,
                last_exec: status.last_exec,
            });
            if produced > 0 {
                self.counters.ocall_drains += 1;
                if kind == CompartmentKind::Execution && !fx.out.is_empty() {
                    self.counters.exec_output_ocalls += 1;
                }
            }
            if first {
                first_backpressure = fx.backpressure;
                first = false;
            }

            for ev in &fx.evidence {
                self.trace(out, now, TraceEvent::Evidence {
                    enclave,
                    description: ev.to_string(),
                });
            }
            if !fx.executed.is_empty() {
                // Progress: relax the suspicion backoff.
                self.vc_backoff = self.cfg.request_timeout;
            }
            for (n, d) in &fx.executed {
                self.trace(out, now, TraceEvent::Executed {
                    replica: self.replica,
                    n: *n,
                    d: *d,
                });
            }
            for p in fx.persists {
                match p {
                    PersistEffect::LedgerBlock { index, sealed } => {
                        self.counters.persist_blocks += 1;
                        self.trace(out, now, TraceEvent::Persist {
                            replica: self.replica,
                            kind: "block",
                            id: index,
                        });
                        self.block_store.push((index, sealed.clone()));
                        self.fresh_blocks.push((index, sealed));
                        pending.push_back((
                            CompartmentKind::Execution,
                            EnclaveEvent::PersistAck { index },
                        ));
                    }
                    PersistEffect::Snapshot { n, sealed } => {
                        self.counters.persist_snapshots += 1;
                        self.trace(out, now, TraceEvent::Persist {
                            replica: self.replica,
                            kind: "snapshot",
                            id: n,
                        });
                        self.snapshot_store.insert(n, sealed);
                    }
                }
            }
            if let Some((n, _)) = fx.fetch_snapshot {
                for r in self.cfg.replicas() {
                    if r != self.replica {
                        out.sends
                            .push((Addr::Replica(r), Frame::SnapshotRequest { n }));
                    }
                }
            }
            if let Some((client, result)) = fx.attest_response {
                out.sends.push((
                    Addr::Client(client),
                    Frame::AttestResult {
                        client,
                        target: enclave,
                        ok: result.is_ok(),
                    },
                ));
            }

            for ob in fx.out {
                self.trace(out, now, TraceEvent::Emit {
                    enclave,
                    meta: meta_of(&ob.msg),
                    dest: match ob.dest {
                        Dest::AllReplicas => "all".to_string(),
                        Dest::Replica(r) => format!("r{r}"),
                        Dest::Client(c) => format!("c{c}"),
                    },
                });
                match &ob.msg {
                    // Our Confirmation enclave provably reached these views.
                    Message::ViewChange(vc) if kind == CompartmentKind::Confirmation => {
                        self.conf_view_emitted = self.conf_view_emitted.max(vc.new_view);
                    }
                    Message::Commit(c) if kind == CompartmentKind::Confirmation => {
                        self.conf_view_emitted = self.conf_view_emitted.max(c.v);
                    }
                    Message::NewView(nv) => {
                        self.conf_view_hint = self.conf_view_hint.max(nv.v);
                    }
                    Message::Reply(r) => {
                        self.request_timers.remove(&(r.c, r.t));
                    }
                    _ => {}
                }
                let bytes = ob.msg.encode();
                match ob.dest {
                    Dest::AllReplicas => {
                        for r in self.cfg.replicas() {
                            if r == self.replica {
                                continue;
                            }
                            self.send_frame(
                                Addr::Replica(r),
                                Frame::Protocol(bytes.clone()),
                                &policy,
                                now,
                                out,
                            );
                        }
                        // Loopback: sibling compartments on this replica.
                        pending.extend(self.local_route(&ob.msg));
                    }
                    Dest::Replica(r) if r == self.replica => {
                        pending.extend(self.local_route(&ob.msg));
                    }
                    Dest::Replica(r) => {
                        self.send_frame(
                            Addr::Replica(r),
                            Frame::Protocol(bytes),
                            &policy,
                            now,
                            out,
                        );
                    }
                    Dest::Client(c) => {
                        self.send_frame(
                            Addr::Client(c),
                            Frame::Protocol(bytes),
                            &policy,
                            now,
                            out,
                        );
                    }
                }
            }
        }
        first_backpressure
    }

    /// Local routing for loopback messages (no policy games on loopback; a
    /// byzantine env gains nothing the inbound path does not already model).
    fn local_route(&mut self, msg: &Message) -> Vec<(CompartmentKind, EnclaveEvent)> {
        use CompartmentKind::*;
        match msg {
            Message::Request(_) | Message::Reply(_) => Vec::new(),
            Message::PrePrepare(_) | Message::Checkpoint(_) => [Preparation, Confirmation, Execution]
                .iter()
                .map(|k| (*k, EnclaveEvent::Protocol(msg.clone())))
                .collect(),
            Message::NewView(nv) => {
                let mut v: Vec<(CompartmentKind, EnclaveEvent)> =
                    [Preparation, Confirmation, Execution]
                        .iter()
                        .map(|k| (*k, EnclaveEvent::Protocol(msg.clone())))
                        .collect();
                for pp in &nv.preprepares {
                    for k in [Confirmation, Execution] {
                        v.push((k, EnclaveEvent::Protocol(Message::PrePrepare(pp.clone()))));
                    }
                }
                v
            }
            Message::Prepare(_) => vec![(Confirmation, EnclaveEvent::Protocol(msg.clone()))],
            Message::Commit(_) => vec![(Execution, EnclaveEvent::Protocol(msg.clone()))],
            Message::ViewChange(_) => vec![(Preparation, EnclaveEvent::Protocol(msg.clone()))],
        }
    }

    fn send_frame(
        &mut self,
        to: Addr,
        frame: Frame,
        policy: &EnvPolicy,
        now: u64,
        out: &mut BrokerOutput,
    ) {
        if policy.drop_outbound > 0.0 && self.rng.gen_bool(policy.drop_outbound) {
            self.trace(out, now, TraceEvent::EnvAction {
                replica: self.replica,
                action: "drop-outbound",
                summary: frame.summary(),
            });
            return;
        }
        out.sends.push((to, frame));
    }

    fn trace(&self, out: &mut BrokerOutput, tick: u64, event: TraceEvent) {
        if self.trace_enabled {
            out.trace.push(TraceRecord { tick, event });
        }
    }

    /// Final-state blobs of the non-Execution compartments, for the
    /// confidentiality scan.
    pub fn compartment_scan(&self) -> Vec<(EnclaveId, Vec<Vec<u8>>)> {
        let mut result = Vec::new();
        for kind in [CompartmentKind::Preparation, CompartmentKind::Confirmation] {
            let comp = self.compartment(kind);
            let mut blobs = Vec::new();
            comp.scan_state(&mut |b: &[u8]| blobs.push(b.to_vec()));
            result.push((EnclaveId::new(self.replica, kind), blobs));
        }
        result
    }

    /// Honest-environment sanity check used by tests.
    pub fn is_honest_at(&self, now: u64) -> bool {
        self.policy_at(now).is_honest()
    }
}
