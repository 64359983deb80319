//! Byzantine enclave behaviors as drop-in wrappers around honest state
//! machines, so fault code cannot silently diverge from the wire format.
//! A wrapped enclave holds its own copy of the key material — a compromised
//! enclave can sign anything — and activation is controlled by the runner
//! through a shared flag (timers stay outside the enclave boundary).

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use super::scenario::FaultBehavior;
use crate::compartment::{
    Compartment, CompartmentStatus, Dest, Effects, EnclaveEvent, Outbound,
};
use crate::config::{ClientId, CompartmentKind, Config, ReplicaId, SeqNo, View};
use crate::crypto::{enclave_accept_offer, AttestPolicy, EnclaveKeyPair, KeyRegistry};
use crate::digest::Digest;
use crate::messages::{batch_digest, Message, NewView, PrePrepare, Prepare, Reply, Request};

/// Runner-side handle that switches a fault on and off as virtual time
/// passes its activation window.
#[derive(Clone)]
pub struct FaultSwitch {
    active: Arc<AtomicBool>,
    pub from: u64,
    pub to: u64,
}

impl FaultSwitch {
    pub fn new(from: u64, to: u64) -> Self {
        FaultSwitch {
            active: Arc::new(AtomicBool::new(from == 0)),
            from,
            to,
        }
    }

    pub fn update(&self, now: u64) {
        self.active
            .store(now >= self.from && now < self.to, Ordering::Relaxed);
    }

    fn is_active(&self) -> bool {
        self.active.load(Ordering::Relaxed)
    }
}

pub struct FaultyCompartment {
    inner: Box<dyn Compartment>,
    behavior: FaultBehavior,
    switch: FaultSwitch,
    keys: EnclaveKeyPair,
    registry: KeyRegistry,
    cfg: Config,
    amnesia_pending: bool,
    /// Stolen client sessions, for authenticated garbage replies.
    sessions: BTreeMap<ClientId, ([u8; 32], [u8; 32])>,
    garbage_counter: u64,
    /// Batches seen per slot, for coordinated digest splits.
    seen_batches: BTreeMap<(View, SeqNo), Vec<Request>>,
    delayed: VecDeque<Outbound>,
}

impl FaultyCompartment {
    pub fn new(
        inner: Box<dyn Compartment>,
        behavior: FaultBehavior,
        switch: FaultSwitch,
        keys: EnclaveKeyPair,
        registry: KeyRegistry,
        cfg: Config,
    ) -> Self {
        FaultyCompartment {
            inner,
            behavior,
            switch,
            keys,
            registry,
            cfg,
            amnesia_pending: true,
            sessions: BTreeMap::new(),
            garbage_counter: 0,
            seen_batches: BTreeMap::new(),
            delayed: VecDeque::new(),
        }
    }

    fn me(&self) -> ReplicaId {
        self.keys.id().replica
    }

    /// Flip one ciphertext byte of the first request: an involution, so
    /// every colluding wrapper derives the same variant pair from either
    /// variant.
    fn involute(batch: &[Request]) -> Vec<Request> {
        let mut out = batch.to_vec();
        if let Some(first) = out.first_mut() {
            if first.op_ciphertext.is_empty() {
                first.op_ciphertext.push(0xFF);
            } else {
                first.op_ciphertext[0] ^= 0xFF;
            }
        }
        out
    }

    fn variant_pair(batch: &[Request]) -> (Vec<Request>, Vec<Request>) {
        let other = Self::involute(batch);
        let (a, b) = (batch.to_vec(), other);
        if batch_digest(&a) <= batch_digest(&b) {
            (a, b)
        } else {
            (b, a)
        }
    }

    fn sign_preprepare(&self, v: View, n: SeqNo, batch: Vec<Request>) -> PrePrepare {
        let mut pp = PrePrepare {
            v,
            n,
            batch,
            sig: Vec::new(),
        };
        pp.sig = self.keys.sign(&pp.signed_bytes());
        pp
    }

    fn sign_prepare(&self, v: View, n: SeqNo, d: Digest) -> Prepare {
        let mut p = Prepare {
            v,
            n,
            d,
            i: self.me(),
            sig: Vec::new(),
        };
        p.sig = self.keys.sign(&p.signed_bytes());
        p
    }

    fn rewrite(&mut self, event: &EnclaveEvent, mut fx: Effects) -> Effects {
        match &self.behavior {
            FaultBehavior::Crash => Effects::none(),
            FaultBehavior::Mute => {
                fx.out.clear();
                fx.persists.clear();
                fx.attest_response = None;
                fx.fetch_snapshot = None;
                fx
            }
            FaultBehavior::DelayAll => {
                self.delayed.extend(fx.out.drain(..));
                // Release stale outputs a few events later.
                while self.delayed.len() > 6 {
                    let ob = self.delayed.pop_front().unwrap();
                    fx.out.push(ob);
                }
                fx
            }
            FaultBehavior::Equivocate => {
                let mut extra: Vec<Outbound> = Vec::new();
                let mut rewritten: Vec<Outbound> = Vec::new();
                for ob in fx.out.drain(..) {
                    match &ob.msg {
                        Message::PrePrepare(pp) => {
                            let mutated =
                                self.sign_preprepare(pp.v, pp.n, Self::involute(&pp.batch));
                            for r in self.cfg.replicas() {
                                let msg = if r % 2 == 0 {
                                    Message::PrePrepare(pp.clone())
                                } else {
                                    Message::PrePrepare(mutated.clone())
                                };
                                rewritten.push(Outbound {
                                    dest: Dest::Replica(r),
                                    msg,
                                });
                            }
                        }
                        Message::Prepare(p) => {
                            // Conflicting digest toward odd replicas.
                            let fake = self.sign_prepare(
                                p.v,
                                p.n,
                                Digest::of_parts(&[b"equivocate", p.d.as_bytes()]),
                            );
                            for r in self.cfg.replicas() {
                                let msg = if r % 2 == 0 {
                                    Message::Prepare(p.clone())
                                } else {
                                    Message::Prepare(fake.clone())
                                };
                                rewritten.push(Outbound {
                                    dest: Dest::Replica(r),
                                    msg,
                                });
                            }
                        }
                        _ => rewritten.push(ob),
                    }
                }
                fx.out = rewritten;
                fx.out.extend(extra.drain(..));
                fx
            }
            FaultBehavior::SplitBrain { dark } => {
                let dark: BTreeSet<ReplicaId> = dark.iter().copied().collect();
                if let EnclaveEvent::Protocol(Message::PrePrepare(pp)) = event {
                    self.seen_batches.insert((pp.v, pp.n), pp.batch.clone());
                }
                let mut rewritten: Vec<Outbound> = Vec::new();
                for ob in fx.out.drain(..) {
                    match &ob.msg {
                        Message::PrePrepare(pp) => {
                            let (light_batch, dark_batch) = Self::variant_pair(&pp.batch);
                            let light_pp = self.sign_preprepare(pp.v, pp.n, light_batch);
                            let dark_pp = self.sign_preprepare(pp.v, pp.n, dark_batch);
                            self.seen_batches
                                .insert((pp.v, pp.n), pp.batch.clone());
                            for r in self.cfg.replicas() {
                                let msg = if dark.contains(&r) {
                                    Message::PrePrepare(dark_pp.clone())
                                } else {
                                    Message::PrePrepare(light_pp.clone())
                                };
                                rewritten.push(Outbound {
                                    dest: Dest::Replica(r),
                                    msg,
                                });
                            }
                        }
                        Message::Prepare(p) => {
                            let Some(batch) = self.seen_batches.get(&(p.v, p.n)).cloned() else {
                                rewritten.push(ob);
                                continue;
                            };
                            let (light_batch, dark_batch) = Self::variant_pair(&batch);
                            let light = self.sign_prepare(p.v, p.n, batch_digest(&light_batch));
                            let darkp = self.sign_prepare(p.v, p.n, batch_digest(&dark_batch));
                            for r in self.cfg.replicas() {
                                let msg = if dark.contains(&r) {
                                    Message::Prepare(darkp.clone())
                                } else {
                                    Message::Prepare(light.clone())
                                };
                                rewritten.push(Outbound {
                                    dest: Dest::Replica(r),
                                    msg,
                                });
                            }
                        }
                        _ => rewritten.push(ob),
                    }
                }
                fx.out = rewritten;
                fx
            }
            FaultBehavior::LieCommit => {
                if let EnclaveEvent::Protocol(Message::Prepare(p)) = event {
                    // A commit with no certificate behind it, plus one for a
                    // digest nobody proposed.
                    for d in [p.d, Digest::of_parts(&[b"lie", p.d.as_bytes()])] {
                        let mut commit = crate::messages::Commit {
                            v: p.v,
                            n: p.n,
                            d,
                            i: self.me(),
                            sig: Vec::new(),
                        };
                        commit.sig = self.keys.sign(&commit.signed_bytes());
                        fx.out.push(Outbound {
                            dest: Dest::AllReplicas,
                            msg: Message::Commit(commit),
                        });
                    }
                }
                fx
            }
            FaultBehavior::GarbageReplies => {
                for ob in fx.out.iter_mut() {
                    if let Message::Reply(reply) = &ob.msg {
                        if let Some((mac_key, s_enc)) = self.sessions.get(&reply.c) {
                            let garbage = vec![0xAA; 10];
                            self.garbage_counter += 1;
                            let ct = crate::crypto::seal_blob(
                                s_enc,
                                // Distinct role keeps nonces off the honest
                                // enclave's sequence.
                                self.me() | 0x8000_0000,
                                self.garbage_counter,
                                &garbage,
                            );
                            let mut forged = Reply {
                                v: reply.v,
                                t: reply.t,
                                c: reply.c,
                                i: reply.i,
                                result_ciphertext: ct,
                                auth: Vec::new(),
                            };
                            forged.auth =
                                crate::crypto::reply_mac(mac_key, &forged.mac_input());
                            ob.msg = Message::Reply(forged);
                        }
                    }
                }
                fx
            }
            FaultBehavior::ForgeNewView { victim } => {
                let victim = *victim;
                let mut rewritten: Vec<Outbound> = Vec::new();
                for ob in fx.out.drain(..) {
                    match &ob.msg {
                        Message::NewView(nv) => {
                            let forged = self.forge_newview(nv);
                            for r in self.cfg.replicas() {
                                let msg = if r == victim {
                                    Message::NewView(forged.clone())
                                } else {
                                    Message::NewView(nv.clone())
                                };
                                rewritten.push(Outbound {
                                    dest: Dest::Replica(r),
                                    msg,
                                });
                            }
                        }
                        _ => rewritten.push(ob),
                    }
                }
                fx.out = rewritten;
                fx
            }
            // Handled elsewhere (amnesia at entry, env policies at scenario
            // level).
            FaultBehavior::Amnesia | FaultBehavior::CorruptEnv { .. } => fx,
        }
    }

    /// Valid proof and checkpoint, one extra bogus PrePrepare: accepted by
    /// the view-sync handler, rejected by Preparation's re-validation.
    fn forge_newview(&self, nv: &NewView) -> NewView {
        let max_n = nv
            .preprepares
            .iter()
            .map(|pp| pp.n)
            .max()
            .unwrap_or(nv.ckpt.n);
        let bogus = self.sign_preprepare(nv.v, max_n + 1, vec![Request::noop()]);
        let mut forged = NewView {
            v: nv.v,
            proof: nv.proof.clone(),
            preprepares: nv.preprepares.iter().cloned().chain([bogus]).collect(),
            ckpt: nv.ckpt.clone(),
            sig: Vec::new(),
        };
        forged.sig = self.keys.sign(&forged.signed_bytes());
        forged
    }
}

impl Compartment for FaultyCompartment {
    fn kind(&self) -> CompartmentKind {
        self.inner.kind()
    }

    fn replica(&self) -> ReplicaId {
        self.inner.replica()
    }

    fn handle(&mut self, event: EnclaveEvent) -> Effects {
        // Session theft happens regardless of activation: a compromised
        // enclave saw every install.
        if let EnclaveEvent::SessionInstall(offer) = &event {
            if let Ok(m) =
                enclave_accept_offer(&self.keys, &self.registry, &AttestPolicy::default(), offer)
            {
                if let Some(s_enc) = m.s_enc {
                    self.sessions.insert(offer.client, (m.mac_key, s_enc));
                }
            }
        }
        if !self.switch.is_active() {
            return self.inner.handle(event);
        }
        if matches!(self.behavior, FaultBehavior::Crash) {
            return Effects::none();
        }
        if matches!(self.behavior, FaultBehavior::Amnesia) && self.amnesia_pending {
            self.amnesia_pending = false;
            self.inner.amnesia_reset();
        }
        let fx = self.inner.handle(event.clone());
        self.rewrite(&event, fx)
    }

    fn status(&self) -> CompartmentStatus {
        self.inner.status()
    }

    fn scan_state(&self, sink: &mut dyn FnMut(&[u8])) {
        self.inner.scan_state(sink);
    }

    fn amnesia_reset(&mut self) {
        self.inner.amnesia_reset();
    }
}
