//! Confirmation compartment: collects prepare certificates and emits
//! Commits, sends ViewChanges on suspicion, syncs views from NewViews
//! without validating their PrePrepares, and garbage-collects on checkpoint
//! certificates.

use std::collections::{BTreeMap, BTreeSet};

use super::{Compartment, CompartmentStatus, Effects, EnclaveEvent, Evidence};
use crate::certificate::{
    assemble_checkpoint_cert, assemble_prepare_cert, validate_checkpoint_cert,
    validate_viewchange, AssembleError,
};
use crate::config::{in_window, CompartmentKind, Config, EnclaveId, ReplicaId, SeqNo, View};
use crate::crypto::{EnclaveKeyPair, KeyRegistry};
use crate::digest::Digest;
use crate::messages::{
    Checkpoint, CheckpointCertificate, Commit, Message, NewView, PrePrepare, Prepare,
    PrepareCertificate, ViewChange,
};

pub struct Confirmation {
    keys: EnclaveKeyPair,
    registry: KeyRegistry,
    cfg: Config,

    view: View,
    low_watermark: SeqNo,
    stable_ckpt: Option<CheckpointCertificate>,

    // PrePrepares are duplicated into this log so certificates can be
    // assembled without trusting the Preparation compartment's copy.
    preprepares: BTreeMap<(View, SeqNo), PrePrepare>,
    prepares: BTreeMap<(View, SeqNo), BTreeMap<ReplicaId, Prepare>>,
    own_commits: BTreeMap<(View, SeqNo), Commit>,
    checkpoints: BTreeMap<SeqNo, BTreeMap<ReplicaId, Checkpoint>>,
}

impl Confirmation {
    pub fn new(keys: EnclaveKeyPair, registry: KeyRegistry, cfg: Config) -> Self {
        Confirmation {
            keys,
            registry,
            cfg,
            view: 0,
            low_watermark: 0,
            stable_ckpt: None,
            preprepares: BTreeMap::new(),
            prepares: BTreeMap::new(),
            own_commits: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
        }
    }

    fn me(&self) -> ReplicaId {
        self.keys.id().replica
    }

    /// Handler: PrePrepare copy (the broker duplicates these here).
    fn on_preprepare_copy(&mut self, pp: PrePrepare) -> Effects {
        let mut fx = Effects::none();
        let primary = self.cfg.primary_of(pp.v);
        let signer = EnclaveId::new(primary, CompartmentKind::Preparation);
        if self
            .registry
            .verify(signer, &pp.signed_bytes(), &pp.sig)
            .is_err()
        {
            return fx;
        }
        if pp.v < self.view || !in_window(pp.n, self.low_watermark, self.cfg.window) {
            return fx;
        }
        if let Some(existing) = self.preprepares.get(&(pp.v, pp.n)) {
            if existing.digest() != pp.digest() {
                fx.evidence.push(Evidence::Equivocation {
                    v: pp.v,
                    n: pp.n,
                    first: existing.digest(),
                    second: pp.digest(),
                });
            }
            return fx;
        }
        let slot = (pp.v, pp.n);
        self.preprepares.insert(slot, pp);
        self.try_commit(slot, &mut fx);
        fx
    }

    /// Handler: Prepare from a non-primary Preparation enclave. Prepares for
    /// views at or above ours are logged (`v >= view`); certificates then
    /// gate the Commit.
    fn on_prepare(&mut self, p: Prepare) -> Effects {
        let mut fx = Effects::none();
        if p.i == self.cfg.primary_of(p.v) {
            return fx;
        }
        let signer = EnclaveId::new(p.i, CompartmentKind::Preparation);
        if self
            .registry
            .verify(signer, &p.signed_bytes(), &p.sig)
            .is_err()
        {
            return fx;
        }
        if p.v < self.view || !in_window(p.n, self.low_watermark, self.cfg.window) {
            return fx;
        }
        let slot = (p.v, p.n);
        let senders = self.prepares.entry(slot).or_default();
        if let Some(existing) = senders.get(&p.i) {
            if existing.d != p.d {
                fx.evidence.push(Evidence::ConflictingSender {
                    replica: p.i,
                    v: p.v,
                    n: p.n,
                });
            }
            return fx;
        }
        senders.insert(p.i, p);
        self.try_commit(slot, &mut fx);
        fx
    }

    /// Emit a Commit once a prepare certificate assembles for the slot and
    /// none was emitted for it before.
    fn try_commit(&mut self, slot: (View, SeqNo), fx: &mut Effects) {
        if self.own_commits.contains_key(&slot) {
            return;
        }
        let (v, n) = slot;
        if v < self.view {
            return;
        }
        let pps: Vec<PrePrepare> = self.preprepares.get(&slot).cloned().into_iter().collect();
        let prepares: Vec<Prepare> = self
            .prepares
            .get(&slot)
            .map(|m| m.values().cloned().collect())
            .unwrap_or_default();
        match assemble_prepare_cert(&pps, &prepares, &self.cfg) {
            Ok(cert) => {
                let mut commit = Commit {
                    v,
                    n,
                    d: cert.digest(),
                    i: self.me(),
                    sig: Vec::new(),
                };
                commit.sig = self.keys.sign(&commit.signed_bytes());
                self.own_commits.insert(slot, commit.clone());
                // Certificate view becomes our view (monotone).
                if v > self.view {
                    self.view = v;
                }
                fx.broadcast(Message::Commit(commit));
            }
            Err(AssembleError::Conflict { v, n, d1, d2 }) => {
                fx.evidence.push(Evidence::CertificateConflict { v, n, d1, d2 });
            }
            Err(AssembleError::Insufficient) => {}
        }
    }

    /// Handler: view-change trigger from the environment's timers. Stale
    /// triggers are ignored; a matching one emits the ViewChange and bumps
    /// the view so the old view is dead here from now on.
    fn on_viewchange_trigger(&mut self, suspected_view: View) -> Effects {
        let mut fx = Effects::none();
        if suspected_view != self.view {
            return fx;
        }
        let ckpt = self
            .stable_ckpt
            .clone()
            .unwrap_or_else(|| CheckpointCertificate::genesis(Digest::ZERO));
        let mut vc = ViewChange {
            new_view: self.view + 1,
            ckpt,
            prepare_certs: self.collect_prepare_certs(),
            i: self.me(),
            sig: Vec::new(),
        };
        vc.sig = self.keys.sign(&vc.signed_bytes());
        self.view += 1;
        fx.broadcast(Message::ViewChange(vc));
        fx
    }

    /// Every assemblable prepare certificate above the watermark, one per
    /// sequence (highest view wins).
    fn collect_prepare_certs(&self) -> Vec<PrepareCertificate> {
        let mut per_seq: BTreeMap<SeqNo, PrepareCertificate> = BTreeMap::new();
        let mut slots: BTreeSet<(View, SeqNo)> = BTreeSet::new();
        slots.extend(self.preprepares.keys().copied());
        for (v, n) in slots {
            if n <= self.low_watermark || n > self.low_watermark + self.cfg.window {
                continue;
            }
            let pps: Vec<PrePrepare> =
                self.preprepares.get(&(v, n)).cloned().into_iter().collect();
            let prepares: Vec<Prepare> = self
                .prepares
                .get(&(v, n))
                .map(|m| m.values().cloned().collect())
                .unwrap_or_default();
            if let Ok(cert) = assemble_prepare_cert(&pps, &prepares, &self.cfg) {
                match per_seq.get(&n) {
                    Some(existing) if existing.v() >= v => {}
                    _ => {
                        per_seq.insert(n, cert);
                    }
                }
            }
        }
        per_seq.into_values().collect()
    }

    /// Handler (7'): adopt the view and checkpoint from a NewView without
    /// validating the re-issued PrePrepares.
    fn on_newview_sync(&mut self, nv: NewView) -> Effects {
        let fx = Effects::none();
        let primary = self.cfg.primary_of(nv.v);
        let signer = EnclaveId::new(primary, CompartmentKind::Preparation);
        if self
            .registry
            .verify(signer, &nv.signed_bytes(), &nv.sig)
            .is_err()
        {
            return fx;
        }
        if nv.v < self.view {
            return fx;
        }
        if !self.validate_newview_proof(&nv) {
            return fx;
        }
        if nv.v > self.view {
            self.view = nv.v;
        }
        self.apply_checkpoint_cert(&nv.ckpt);
        fx
    }

    fn validate_newview_proof(&self, nv: &NewView) -> bool {
        if nv.proof.len() != self.cfg.quorum() {
            return false;
        }
        let mut senders = BTreeSet::new();
        for vc in &nv.proof {
            if vc.new_view != nv.v || !senders.insert(vc.i) {
                return false;
            }
            if validate_viewchange(vc, &self.registry, &self.cfg).is_err() {
                return false;
            }
        }
        validate_checkpoint_cert(&nv.ckpt, &self.registry, &self.cfg).is_ok()
    }

    /// Handler (9): duplicated checkpoint collection and GC.
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
            Ok(cert) => self.apply_checkpoint_cert(&cert),
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
        self.stable_ckpt = Some(cert.clone());
        let n = cert.n;
        self.preprepares.retain(|(_, seq), _| *seq > n);
        self.prepares.retain(|(_, seq), _| *seq > n);
        self.own_commits.retain(|(_, seq), _| *seq > n);
        self.checkpoints.retain(|seq, _| *seq > n);
    }

    pub fn view(&self) -> View {
        self.view
    }
}

impl Compartment for Confirmation {
    fn kind(&self) -> CompartmentKind {
        CompartmentKind::Confirmation
    }

    fn replica(&self) -> ReplicaId {
        self.me()
    }

    fn handle(&mut self, event: EnclaveEvent) -> Effects {
        match event {
            EnclaveEvent::Protocol(Message::PrePrepare(pp)) => self.on_preprepare_copy(pp),
            EnclaveEvent::Protocol(Message::Prepare(p)) => self.on_prepare(p),
            EnclaveEvent::Protocol(Message::NewView(nv)) => self.on_newview_sync(nv),
            EnclaveEvent::Protocol(Message::Checkpoint(c)) => self.on_checkpoint(c),
            EnclaveEvent::ViewChangeTrigger { suspected_view } => {
                self.on_viewchange_trigger(suspected_view)
            }
            _ => Effects::none(),
        }
    }

    fn status(&self) -> CompartmentStatus {
        CompartmentStatus {
            view: self.view,
            low_watermark: self.low_watermark,
            log_entries: self.preprepares.len()
                + self.prepares.values().map(|m| m.len()).sum::<usize>()
                + self.own_commits.len()
                + self.checkpoints.values().map(|m| m.len()).sum::<usize>(),
            last_exec: None,
        }
    }

    fn scan_state(&self, sink: &mut dyn FnMut(&[u8])) {
        for pp in self.preprepares.values() {
            sink(&pp.encode());
        }
        for m in self.prepares.values() {
            for p in m.values() {
                sink(&p.encode());
            }
        }
    }

    fn amnesia_reset(&mut self) {
        let dummy = EnclaveKeyPair::from_seed(self.keys.id(), b"amnesia-dummy");
        let keys = std::mem::replace(&mut self.keys, dummy);
        *self = Confirmation::new(keys, self.registry.clone(), self.cfg.clone());
    }
}
