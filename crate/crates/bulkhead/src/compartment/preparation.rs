//! Preparation compartment: request intake and PrePrepare emission when
//! primary, Prepare emission as backup, NewView construction and validation,
//! plus the duplicated checkpoint handler.

use std::collections::{BTreeMap, BTreeSet};

use super::new_view::compute_new_view;
use super::{
    Compartment, CompartmentStatus, Effects, EnclaveEvent, Evidence,
};
use crate::certificate::{
    assemble_checkpoint_cert, validate_checkpoint_cert, validate_viewchange, AssembleError,
};
use crate::config::{
    in_window, in_wv, ClientId, CompartmentKind, Config, EnclaveId, ReplicaId, SeqNo, View,
};
use crate::crypto::{
    enclave_accept_offer, AttestPolicy, EnclaveKeyPair, KeyRegistry, SessionMaterial,
};
use crate::messages::{
    Checkpoint, CheckpointCertificate, Message, NewView, PrePrepare, Prepare, Request, ViewChange,
};

pub struct Preparation {
    keys: EnclaveKeyPair,
    registry: KeyRegistry,
    cfg: Config,
    attest_policy: AttestPolicy,

    view: View,
    /// Last assigned sequence; meaningful only while primary.
    seqno: SeqNo,
    low_watermark: SeqNo,
    stable_ckpt: Option<CheckpointCertificate>,
    /// Views for which a NewView has been accepted (view 0 is implicit).
    has_new_view: BTreeSet<View>,

    // Typed input log.
    requests: BTreeMap<(ClientId, u64), Request>,
    preprepares: BTreeMap<(View, SeqNo), PrePrepare>,
    own_prepares: BTreeMap<(View, SeqNo), Prepare>,
    viewchanges: BTreeMap<View, BTreeMap<ReplicaId, ViewChange>>,
    checkpoints: BTreeMap<SeqNo, BTreeMap<ReplicaId, Checkpoint>>,

    /// Highest timestamp ordered per client in the current view; cleared on
    /// view adoption so retransmits can be re-ordered by a new primary.
    ordered_t: BTreeMap<ClientId, u64>,
    /// Per-client MAC keys installed via attestation.
    sessions: BTreeMap<ClientId, [u8; 32]>,
}

impl Preparation {
    pub fn new(keys: EnclaveKeyPair, registry: KeyRegistry, cfg: Config) -> Self {
        Preparation {
            keys,
            registry,
            cfg,
            attest_policy: AttestPolicy::default(),
            view: 0,
            seqno: 0,
            low_watermark: 0,
            stable_ckpt: None,
            has_new_view: BTreeSet::new(),
            requests: BTreeMap::new(),
            preprepares: BTreeMap::new(),
            own_prepares: BTreeMap::new(),
            viewchanges: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            ordered_t: BTreeMap::new(),
            sessions: BTreeMap::new(),
        }
    }

    pub fn with_attest_policy(mut self, policy: AttestPolicy) -> Self {
        self.attest_policy = policy;
        self
    }

    fn me(&self) -> ReplicaId {
        self.keys.id().replica
    }

    fn is_primary(&self) -> bool {
        self.cfg.primary_of(self.view) == self.me()
    }

    fn has_new_view(&self, v: View) -> bool {
        v == 0 || self.has_new_view.contains(&v)
    }

    /// Handler: a batch of client requests arrives from the environment.
    fn on_request(&mut self, batch: Vec<Request>) -> Effects {
        let mut fx = Effects::none();
        let mut valid: Vec<Request> = Vec::new();
        for req in batch {
            if req.is_noop() {
                continue;
            }
            let Some(key) = self.sessions.get(&req.c) else {
                continue;
            };
            let Some(tag) = req.mac_for(self.me()) else {
                continue;
            };
            if !crate::crypto::mac_verify(key, &req.mac_input(), tag) {
                continue;
            }
            valid.push(req);
        }
        if valid.is_empty() {
            return fx;
        }

        if self.is_primary() && self.has_new_view(self.view) {
            // Skip timestamps this primary already ordered in this view.
            valid.retain(|r| self.ordered_t.get(&r.c).map_or(true, |t| r.t > *t));
            if valid.is_empty() {
                return fx;
            }
            let n = self.seqno + 1;
            if !in_window(n, self.low_watermark, self.cfg.window) {
                fx.backpressure = true;
                return fx;
            }
            self.seqno = n;
            for r in &valid {
                self.ordered_t.insert(r.c, r.t);
            }
            let mut pp = PrePrepare {
                v: self.view,
                n,
                batch: valid,
                sig: Vec::new(),
            };
            pp.sig = self.keys.sign(&pp.signed_bytes());
            self.preprepares.insert((self.view, n), pp.clone());
            fx.broadcast(Message::PrePrepare(pp));
        } else {
            // Backup: hold the request and push it toward the primary.
            let primary = self.cfg.primary_of(self.view);
            for r in valid {
                self.requests.insert((r.c, r.t), r.clone());
                if primary != self.me() {
                    fx.to_replica(primary, Message::Request(r));
                }
            }
        }
        fx
    }

    /// Handler: PrePrepare from the view primary.
    fn on_preprepare(&mut self, pp: PrePrepare) -> Effects {
        let mut fx = Effects::none();
        let primary = self.cfg.primary_of(pp.v);
        if primary == self.me() {
            // Loopback of our own proposal.
            return fx;
        }
        let signer = EnclaveId::new(primary, CompartmentKind::Preparation);
        if self
            .registry
            .verify(signer, &pp.signed_bytes(), &pp.sig)
            .is_err()
        {
            return fx;
        }
        if !in_wv(pp.v, pp.n, self.view, self.low_watermark, self.cfg.window)
            || !self.has_new_view(pp.v)
        {
            return fx;
        }
        let d = pp.digest();
        if let Some(existing) = self.preprepares.get(&(pp.v, pp.n)) {
            let first = existing.digest();
            if first != d {
                fx.evidence.push(Evidence::Equivocation {
                    v: pp.v,
                    n: pp.n,
                    first,
                    second: d,
                });
            }
            return fx;
        }
        if let Some(own) = self.own_prepares.get(&(pp.v, pp.n)) {
            if own.d != d {
                fx.evidence.push(Evidence::Equivocation {
                    v: pp.v,
                    n: pp.n,
                    first: own.d,
                    second: d,
                });
                return fx;
            }
        }
        let mut prepare = Prepare {
            v: pp.v,
            n: pp.n,
            d,
            i: self.me(),
            sig: Vec::new(),
        };
        prepare.sig = self.keys.sign(&prepare.signed_bytes());
        self.preprepares.insert((pp.v, pp.n), pp);
        self.own_prepares
            .insert((prepare.v, prepare.n), prepare.clone());
        fx.broadcast(Message::Prepare(prepare));
        fx
    }

    /// Handler: ViewChange votes; the incoming primary assembles a NewView
    /// once a quorum holds.
    fn on_viewchange(&mut self, vc: ViewChange) -> Effects {
        let mut fx = Effects::none();
        if vc.new_view <= self.view && self.has_new_view(vc.new_view) {
            return fx;
        }
        if validate_viewchange(&vc, &self.registry, &self.cfg).is_err() {
            return fx;
        }
        self.viewchanges
            .entry(vc.new_view)
            .or_default()
            .insert(vc.i, vc.clone());

        let target = vc.new_view;
        if self.cfg.primary_of(target) != self.me() || self.has_new_view(target) {
            return fx;
        }
        let collected = &self.viewchanges[&target];
        if collected.len() < self.cfg.quorum() {
            return fx;
        }
        // Deterministic quorum: lowest 2f+1 sender ids.
        let quorum: Vec<ViewChange> = collected
            .values()
            .take(self.cfg.quorum())
            .cloned()
            .collect();
        let plan = compute_new_view(&quorum);

        let mut preprepares = Vec::new();
        for (n, batch) in &plan.slots {
            let mut pp = PrePrepare {
                v: target,
                n: *n,
                batch: batch.clone(),
                sig: Vec::new(),
            };
            pp.sig = self.keys.sign(&pp.signed_bytes());
            self.preprepares.insert((target, *n), pp.clone());
            preprepares.push(pp);
        }
        let mut nv = NewView {
            v: target,
            proof: quorum,
            preprepares,
            ckpt: plan.ckpt.clone(),
            sig: Vec::new(),
        };
        nv.sig = self.keys.sign(&nv.signed_bytes());

        self.adopt_view(target, plan.slots.last().map(|(n, _)| *n));
        self.apply_checkpoint_cert(&plan.ckpt);
        fx.broadcast(Message::NewView(nv));
        fx
    }

    /// Handler: NewView validation. Repeats the construction logic; on any
    /// mismatch nothing is applied here (the Confirmation and Execution
    /// compartments still sync views via their own handler).
    fn on_newview(&mut self, nv: NewView) -> Effects {
        let mut fx = Effects::none();
        let primary = self.cfg.primary_of(nv.v);
        if primary == self.me() {
            return fx;
        }
        if nv.v < self.view || self.has_new_view(nv.v) {
            return fx;
        }
        let signer = EnclaveId::new(primary, CompartmentKind::Preparation);
        if self
            .registry
            .verify(signer, &nv.signed_bytes(), &nv.sig)
            .is_err()
        {
            return fx;
        }
        if let Err(reason) = self.validate_newview(&nv) {
            fx.evidence.push(Evidence::InvalidNewView {
                v: nv.v,
                reason,
            });
            return fx;
        }

        self.adopt_view(nv.v, nv.preprepares.last().map(|pp| pp.n));
        self.apply_checkpoint_cert(&nv.ckpt);
        for pp in nv.preprepares {
            if pp.n <= self.low_watermark {
                continue;
            }
            let d = pp.digest();
            let mut prepare = Prepare {
                v: pp.v,
                n: pp.n,
                d,
                i: self.me(),
                sig: Vec::new(),
            };
            prepare.sig = self.keys.sign(&prepare.signed_bytes());
            self.preprepares.insert((pp.v, pp.n), pp);
            self.own_prepares
                .insert((prepare.v, prepare.n), prepare.clone());
            fx.broadcast(Message::Prepare(prepare));
        }
        fx
    }

    fn validate_newview(&self, nv: &NewView) -> Result<(), String> {
        if nv.proof.len() != self.cfg.quorum() {
            return Err(format!("proof has {} viewchanges", nv.proof.len()));
        }
        let mut senders = BTreeSet::new();
        for vc in &nv.proof {
            if vc.new_view != nv.v {
                return Err("proof viewchange for wrong view".into());
            }
            if !senders.insert(vc.i) {
                return Err(format!("duplicate viewchange sender {}", vc.i));
            }
            validate_viewchange(vc, &self.registry, &self.cfg)
                .map_err(|e| format!("viewchange from {}: {e}", vc.i))?;
        }
        validate_checkpoint_cert(&nv.ckpt, &self.registry, &self.cfg)
            .map_err(|e| format!("checkpoint cert: {e}"))?;

        let plan = compute_new_view(&nv.proof);
        if plan.ckpt.n != nv.ckpt.n || plan.ckpt.d != nv.ckpt.d {
            return Err("checkpoint does not match proof".into());
        }
        if plan.slots.len() != nv.preprepares.len() {
            return Err(format!(
                "expected {} reissued preprepares, got {}",
                plan.slots.len(),
                nv.preprepares.len()
            ));
        }
        let primary = self.cfg.primary_of(nv.v);
        let signer = EnclaveId::new(primary, CompartmentKind::Preparation);
        for (pp, (n, batch)) in nv.preprepares.iter().zip(plan.slots.iter()) {
            if pp.v != nv.v || pp.n != *n {
                return Err(format!("reissued preprepare at wrong slot {}", pp.n));
            }
            if pp.digest() != crate::messages::batch_digest(batch) {
                return Err(format!("reissued preprepare digest mismatch at n={n}"));
            }
            self.registry
                .verify(signer, &pp.signed_bytes(), &pp.sig)
                .map_err(|_| format!("reissued preprepare signature at n={n}"))?;
        }
        Ok(())
    }

    /// Handler (duplicated in every compartment): collect Checkpoints and
    /// garbage-collect on a certificate.
    fn on_checkpoint(&mut self, c: Checkpoint) -> Effects {
        let mut fx = Effects::none();
        if c.n <= self.low_watermark || c.n % self.cfg.checkpoint_interval != 0 {
            return fx;
        }
        let signer = EnclaveId::new(c.i, CompartmentKind::Execution);
        if self
            .registry
            .verify(signer, &c.signed_bytes(), &c.sig)
            .is_err()
        {
            return fx;
        }
        self.checkpoints.entry(c.n).or_default().insert(c.i, c.clone());
        let members: Vec<Checkpoint> = self.checkpoints[&c.n].values().cloned().collect();
        match assemble_checkpoint_cert(&members, &self.cfg) {
            Ok(cert) => {
                self.apply_checkpoint_cert(&cert);
            }
            Err(AssembleError::Conflict { v, n, d1, d2 }) => {
                fx.evidence.push(Evidence::CertificateConflict { v, n, d1, d2 });
            }
            Err(AssembleError::Insufficient) => {}
        }
        fx
    }

    fn apply_checkpoint_cert(&mut self, cert: &CheckpointCertificate) {
        if cert.n <= self.low_watermark {
            return;
        }
        self.low_watermark = cert.n;
        if self.seqno < cert.n {
            self.seqno = cert.n;
        }
        self.stable_ckpt = Some(cert.clone());
        let n = cert.n;
        self.preprepares.retain(|(_, seq), _| *seq > n);
        self.own_prepares.retain(|(_, seq), _| *seq > n);
        self.checkpoints.retain(|seq, _| *seq > n);
        let view = self.view;
        self.viewchanges.retain(|v, _| *v > view);
        // Stored raw requests were either ordered and checkpointed or will
        // be retransmitted; drop them to keep the log bounded.
        self.requests.clear();
    }

    fn adopt_view(&mut self, v: View, max_covered: Option<SeqNo>) {
        if v > self.view {
            self.view = v;
        }
        self.has_new_view.insert(v);
        self.ordered_t.clear();
        let base = max_covered.unwrap_or(self.low_watermark);
        if self.seqno < base {
            self.seqno = base;
        }
    }

    fn on_session_install(&mut self, offer: crate::crypto::AttestOffer) -> Effects {
        let mut fx = Effects::none();
        let client = offer.client;
        match enclave_accept_offer(&self.keys, &self.registry, &self.attest_policy, &offer) {
            Ok(SessionMaterial { mac_key, .. }) => {
                self.sessions.insert(client, mac_key);
                fx.attest_response = Some((client, Ok(())));
            }
            Err(e) => {
                fx.attest_response = Some((client, Err(e)));
            }
        }
        fx
    }

    #[cfg(test)]
    pub(crate) fn install_session_key(&mut self, client: ClientId, key: [u8; 32]) {
        self.sessions.insert(client, key);
    }

    pub fn view(&self) -> View {
        self.view
    }
}

impl Compartment for Preparation {
    fn kind(&self) -> CompartmentKind {
        CompartmentKind::Preparation
    }

    fn replica(&self) -> ReplicaId {
        self.me()
    }

    fn handle(&mut self, event: EnclaveEvent) -> Effects {
        match event {
            EnclaveEvent::RequestBatch(batch) => self.on_request(batch),
            EnclaveEvent::Protocol(Message::Request(r)) => self.on_request(vec![r]),
            EnclaveEvent::Protocol(Message::PrePrepare(pp)) => self.on_preprepare(pp),
            EnclaveEvent::Protocol(Message::ViewChange(vc)) => self.on_viewchange(vc),
            EnclaveEvent::Protocol(Message::NewView(nv)) => self.on_newview(nv),
            EnclaveEvent::Protocol(Message::Checkpoint(c)) => self.on_checkpoint(c),
            EnclaveEvent::SessionInstall(offer) => self.on_session_install(offer),
            // Not addressed to this compartment type.
            _ => Effects::none(),
        }
    }

    fn status(&self) -> CompartmentStatus {
        CompartmentStatus {
            view: self.view,
            low_watermark: self.low_watermark,
            log_entries: self.requests.len()
                + self.preprepares.len()
                + self.own_prepares.len()
                + self.viewchanges.values().map(|m| m.len()).sum::<usize>()
                + self.checkpoints.values().map(|m| m.len()).sum::<usize>(),
            last_exec: None,
        }
    }

    fn scan_state(&self, sink: &mut dyn FnMut(&[u8])) {
        for r in self.requests.values() {
            sink(&r.encode());
        }
        for pp in self.preprepares.values() {
            sink(&pp.encode());
        }
        for vcs in self.viewchanges.values() {
            for vc in vcs.values() {
                sink(&vc.encode());
            }
        }
    }

    fn amnesia_reset(&mut self) {
        // Keys, config and sessions survive; the input log does not.
        let dummy = EnclaveKeyPair::from_seed(self.keys.id(), b"amnesia-dummy");
        let keys = std::mem::replace(&mut self.keys, dummy);
        let sessions = std::mem::take(&mut self.sessions);
        let policy = self.attest_policy.clone();
        *self = Preparation::new(keys, self.registry.clone(), self.cfg.clone())
            .with_attest_policy(policy);
        self.sessions = sessions;
    }
}
