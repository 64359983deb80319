//! Client library: session setup through the attestation stub, request
//! sealing and multicast, reply quorum collection, retransmission.
//!
//! A client accepts a result once `f + 1` replies with the same timestamp
//! and the same result digest arrive from distinct replicas. Retransmission
//! reuses the original request bytes, so replicas can serve it from their
//! reply caches.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ClientId, CompartmentKind, Config, EnclaveId, ReplicaId};
use crate::crypto::{
    attest_offer, mac_tag, verify_reply_mac, ClientKeyPair, ClientSealer, KeyRegistry,
    SessionMaterial,
};
use crate::digest::Digest;
use crate::messages::{MacEntry, Message, Reply, Request};
use crate::trace::{TraceEvent, TraceRecord};
use crate::transport::{Addr, Frame};

const MAX_RETRIES: u32 = 10;

pub enum ClientInput {
    Net { from: Addr, frame: Frame },
    Wake,
}

#[derive(Default)]
pub struct ClientOutput {
    pub sends: Vec<(Addr, Frame)>,
    pub wake_at: Option<u64>,
    pub trace: Vec<TraceRecord>,
}

impl ClientOutput {
    fn want_wake(&mut self, at: u64) {
        self.wake_at = Some(self.wake_at.map_or(at, |w| w.min(at)));
    }
}

struct Pending {
    request: Request,
    plaintext_op: Vec<u8>,
    first_sent: u64,
    deadline: u64,
    backoff: u64,
    retries: u32,
    votes: BTreeMap<ReplicaId, Digest>,
    results: BTreeMap<Digest, Vec<u8>>,
}

enum Phase {
    Init,
    Attesting { deadline: u64 },
    Running,
    Done,
}

pub struct Client {
    id: ClientId,
    cfg: Config,
    keys: ClientKeyPair,
    registry: KeyRegistry,
    rng: ChaCha8Rng,

    sealer: ClientSealer,
    mac_keys: BTreeMap<ReplicaId, [u8; 32]>,
    /// Whether to actually seal operations. Turned off only by the
    /// confidentiality checker's broken-client control scenario.
    seal_ops: bool,

    phase: Phase,
    attest_acks: BTreeMap<EnclaveId, bool>,
    prep_ok: BTreeMap<ReplicaId, bool>,
    exec_ok: BTreeMap<ReplicaId, bool>,

    ops: VecDeque<Vec<u8>>,
    outstanding: usize,
    next_t: u64,
    pending: BTreeMap<u64, Pending>,

    pub completed: u64,
    pub failed: u64,
    pub setup_failed: bool,
    /// Accept latencies in ticks, for benchmarking.
    pub latencies: Vec<u64>,
    /// Accepted results by timestamp (plaintext), for history checking.
    pub accepted: BTreeMap<u64, Vec<u8>>,
}

impl Client {
    pub fn new(
        id: ClientId,
        cfg: Config,
        keys: ClientKeyPair,
        registry: KeyRegistry,
        seed: u64,
        ops: Vec<Vec<u8>>,
        outstanding: usize,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id.wrapping_mul(0x9e37_79b9));
        let mut s_enc = [0u8; 32];
        rng.fill(&mut s_enc);
        Client {
            id,
            cfg,
            keys,
            registry,
            rng,
            sealer: ClientSealer::new(s_enc),
            mac_keys: BTreeMap::new(),
            seal_ops: true,
            phase: Phase::Init,
            attest_acks: BTreeMap::new(),
            prep_ok: BTreeMap::new(),
            exec_ok: BTreeMap::new(),
            ops: ops.into(),
            outstanding: outstanding.max(1),
            next_t: 0,
            pending: BTreeMap::new(),
            completed: 0,
            failed: 0,
            setup_failed: false,
            latencies: Vec::new(),
            accepted: BTreeMap::new(),
        }
    }

    /// Control knob for the confidentiality checker: a client that "forgets"
    /// to seal, so plaintext canaries hit the wire.
    pub fn disable_sealing(&mut self) {
        self.seal_ops = false;
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn is_done(&self) -> bool {
        matches!(self.phase, Phase::Done)
    }

    pub fn handle(&mut self, input: ClientInput, now: u64) -> ClientOutput {
        let mut out = ClientOutput::default();
        match input {
            ClientInput::Net { from, frame } => self.on_net(from, frame, now, &mut out),
            ClientInput::Wake => {}
        }
        self.advance(now, &mut out);
        out
    }

    fn on_net(&mut self, _from: Addr, frame: Frame, now: u64, out: &mut ClientOutput) {
        match frame {
            Frame::AttestResult { client, target, ok } if client == self.id => {
                self.attest_acks.insert(target, ok);
                let slot = match target.kind {
                    CompartmentKind::Preparation => &mut self.prep_ok,
                    CompartmentKind::Execution => &mut self.exec_ok,
                    CompartmentKind::Confirmation => return,
                };
                slot.insert(target.replica, ok);
            }
            Frame::Protocol(bytes) => {
                if let Ok(Message::Reply(reply)) = Message::decode(&bytes) {
                    self.on_reply(reply, now, out);
                }
            }
            _ => {}
        }
    }

    fn on_reply(&mut self, reply: Reply, now: u64, out: &mut ClientOutput) {
        if reply.c != self.id {
            return;
        }
        let Some(pending) = self.pending.get_mut(&reply.t) else {
            return;
        };
        let Some(mac_key) = self.mac_keys.get(&reply.i) else {
            return;
        };
        if !verify_reply_mac(mac_key, &reply.mac_input(), &reply.auth) {
            return;
        }
        if self.exec_ok.get(&reply.i) != Some(&true) {
            return;
        }
        let result_plain = if self.seal_ops {
            match self.sealer.open_result(&reply.result_ciphertext) {
                Ok(p) => p,
                Err(_) => return, // garbage or not for us
            }
        } else {
            reply.result_ciphertext.clone()
        };
        let digest = Digest::of(&result_plain);
        pending.votes.insert(reply.i, digest);
        pending.results.insert(digest, result_plain);

        let needed = self.cfg.f as usize + 1;
        let count = pending.votes.values().filter(|d| **d == digest).count();
        if count >= needed {
            let pending = self.pending.remove(&reply.t).unwrap();
            let result = pending.results[&digest].clone();
            self.latencies.push(now.saturating_sub(pending.first_sent));
            self.accepted.insert(reply.t, result.clone());
            self.completed += 1;
            out.trace.push(TraceRecord {
                tick: now,
                event: TraceEvent::ClientAccept {
                    c: self.id,
                    t: reply.t,
                    result,
                    votes: count,
                },
            });
        }
    }

    fn advance(&mut self, now: u64, out: &mut ClientOutput) {
        match self.phase {
            Phase::Init => self.start_attestation(now, out),
            Phase::Attesting { deadline } => {
                let all_acked = self.attest_acks.len() >= (self.cfg.n as usize) * 2;
                if all_acked || now >= deadline {
                    self.finish_attestation(now, out);
                } else {
                    out.want_wake(deadline);
                }
            }
            Phase::Running => self.pump(now, out),
            Phase::Done => {}
        }
    }

    fn start_attestation(&mut self, now: u64, out: &mut ClientOutput) {
        for replica in self.cfg.replicas() {
            let mut mac_key = [0u8; 32];
            self.rng.fill(&mut mac_key);
            self.mac_keys.insert(replica, mac_key);
            for kind in [CompartmentKind::Preparation, CompartmentKind::Execution] {
                let target = EnclaveId::new(replica, kind);
                let Some(attest_pub) = self.registry.attest_public(target) else {
                    continue;
                };
                let mut eph = [0u8; 32];
                self.rng.fill(&mut eph);
                let material = SessionMaterial {
                    mac_key,
                    s_enc: (kind == CompartmentKind::Execution).then(|| self.sealer_key()),
                };
                match attest_offer(&self.keys, target, attest_pub, eph, &material) {
                    Ok(offer) => {
                        out.sends.push((Addr::Replica(replica), Frame::Attest(offer)));
                    }
                    Err(_) => continue,
                }
            }
        }
        let deadline = now + self.cfg.request_timeout;
        self.phase = Phase::Attesting { deadline };
        out.want_wake(deadline);
    }

    fn sealer_key(&self) -> [u8; 32] {
        self.sealer.s_enc()
    }

    fn finish_attestation(&mut self, now: u64, out: &mut ClientOutput) {
        let exec_sessions = self.exec_ok.values().filter(|ok| **ok).count();
        let prep_sessions = self.prep_ok.values().filter(|ok| **ok).count();
        if exec_sessions < self.cfg.f as usize + 1 {
            // Cannot ever collect f+1 matching replies.
            self.setup_failed = true;
            self.phase = Phase::Done;
            out.trace.push(TraceRecord {
                tick: now,
                event: TraceEvent::Note {
                    text: format!(
                        "client c{} setup failed: {exec_sessions} execution sessions",
                        self.id
                    ),
                },
            });
            return;
        }
        if exec_sessions < self.cfg.n as usize || prep_sessions < self.cfg.n as usize {
            out.trace.push(TraceRecord {
                tick: now,
                event: TraceEvent::Note {
                    text: format!(
                        "client c{} proceeding with {prep_sessions} prep / {exec_sessions} exec sessions",
                        self.id
                    ),
                },
            });
        }
        self.phase = Phase::Running;
        self.pump(now, out);
    }

    fn pump(&mut self, now: u64, out: &mut ClientOutput) {
        // Retransmit or give up on overdue requests.
        let overdue: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, p)| now >= p.deadline)
            .map(|(t, _)| *t)
            .collect();
        for t in overdue {
            let p = self.pending.get_mut(&t).unwrap();
            if p.retries >= MAX_RETRIES {
                self.pending.remove(&t);
                self.failed += 1;
                out.trace.push(TraceRecord {
                    tick: now,
                    event: TraceEvent::ClientTimeout { c: self.id, t },
                });
                continue;
            }
            p.retries += 1;
            p.backoff = p.backoff.saturating_mul(2);
            p.deadline = now + p.backoff;
            out.trace.push(TraceRecord {
                tick: now,
                event: TraceEvent::ClientRetransmit { c: self.id, t },
            });
            let bytes = Message::Request(p.request.clone()).encode();
            for replica in self.cfg.replicas() {
                out.sends
                    .push((Addr::Replica(replica), Frame::Protocol(bytes.clone())));
            }
        }

        // Keep the pipeline full.
        while self.pending.len() < self.outstanding {
            let Some(op) = self.ops.pop_front() else {
                break;
            };
            self.submit(op, now, out);
        }

        for p in self.pending.values() {
            out.want_wake(p.deadline);
        }
        if self.pending.is_empty() && self.ops.is_empty() {
            self.phase = Phase::Done;
        }
    }

    fn submit(&mut self, op: Vec<u8>, now: u64, out: &mut ClientOutput) {
        self.next_t += 1;
        let t = self.next_t;
        let op_ciphertext = if self.seal_ops {
            self.sealer.seal_op(&op)
        } else {
            op.clone()
        };
        let mut request = Request {
            op_ciphertext,
            t,
            c: self.id,
            auth: Vec::new(),
        };
        let mac_input = request.mac_input();
        request.auth = self
            .mac_keys
            .iter()
            .filter(|(r, _)| self.prep_ok.get(r) == Some(&true))
            .map(|(r, key)| MacEntry {
                replica: *r,
                tag: mac_tag(key, &mac_input),
            })
            .collect();

        out.trace.push(TraceRecord {
            tick: now,
            event: TraceEvent::ClientSubmit {
                c: self.id,
                t,
                op: op.clone(),
            },
        });
        let bytes = Message::Request(request.clone()).encode();
        for replica in self.cfg.replicas() {
            out.sends
                .push((Addr::Replica(replica), Frame::Protocol(bytes.clone())));
        }
        let backoff = self.cfg.request_timeout;
        self.pending.insert(
            t,
            Pending {
                request,
                plaintext_op: op,
                first_sent: now,
                deadline: now + backoff,
                backoff,
                retries: 0,
                votes: BTreeMap::new(),
                results: BTreeMap::new(),
            },
        );
        out.want_wake(now + backoff);
    }

    /// Plaintext operation for a still-pending timestamp (test hook).
    pub fn pending_op(&self, t: u64) -> Option<&[u8]> {
        self.pending.get(&t).map(|p| p.plaintext_op.as_slice())
    }

    /// The session key bytes, exposed to the harness only so the
    /// non-exfiltration scan can look for them in untrusted traffic.
    pub(crate) fn session_secret(&self) -> [u8; 32] {
        self.sealer.s_enc()
    }
}
