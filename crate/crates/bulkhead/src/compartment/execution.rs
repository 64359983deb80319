//! Execution compartment: drives the application on commit quorums, emits
//! sealed replies and checkpoints, installs snapshots during state transfer.
//! This is the only place request plaintext ever exists.

use std::collections::BTreeMap;

use super::{Compartment, CompartmentStatus, Effects, EnclaveEvent, Evidence, PersistEffect};
use crate::app::Application;
use crate::certificate::{
    assemble_checkpoint_cert, assemble_commit_quorum, validate_checkpoint_cert,
    validate_viewchange, AssembleError,
};
use crate::config::{in_window, ClientId, CompartmentKind, Config, EnclaveId, ReplicaId, SeqNo, View};
use crate::crypto::{
    enclave_accept_offer, open_blob, seal_blob, AttestPolicy, EnclaveKeyPair, ExecSession,
    KeyRegistry, SessionMaterial,
};
use crate::digest::Digest;
use crate::messages::{
    Checkpoint, CheckpointCertificate, Commit, Message, NewView, PrePrepare, Reply,
    DOMAIN_SNAPSHOT,
};
use crate::wire::{Reader, Writer};

/// Last reply state per client: enough to retransmit byte-identically and
/// to digest the reply cache deterministically across replicas.
struct CachedReply {
    t: u64,
    result_plain: Vec<u8>,
    result_digest: Digest,
    sealed: Option<Reply>,
}

pub struct Execution {
    keys: EnclaveKeyPair,
    registry: KeyRegistry,
    cfg: Config,
    attest_policy: AttestPolicy,
    sealing_key: [u8; 32],
    seal_counter: u64,

    view: View,
    low_watermark: SeqNo,
    stable_ckpt: Option<CheckpointCertificate>,

    /// Request bodies by sequence and digest, from duplicated PrePrepares.
    bodies: BTreeMap<SeqNo, BTreeMap<Digest, Vec<crate::messages::Request>>>,
    commits: BTreeMap<(View, SeqNo), BTreeMap<ReplicaId, Commit>>,
    checkpoints: BTreeMap<SeqNo, BTreeMap<ReplicaId, Checkpoint>>,

    last_exec: SeqNo,
    last_rep: BTreeMap<ClientId, CachedReply>,
    app: Box<dyn Application>,
    /// Sealed snapshots by sequence.
    chkpts: BTreeMap<SeqNo, Vec<u8>>,
    sessions: BTreeMap<ClientId, ExecSession>,
    /// Outstanding state-transfer request, if any.
    pending_fetch: Option<(SeqNo, Digest)>,
}

impl Execution {
    pub fn new(
        keys: EnclaveKeyPair,
        registry: KeyRegistry,
        cfg: Config,
        sealing_key: [u8; 32],
        app: Box<dyn Application>,
    ) -> Self {
        Execution {
            keys,
            registry,
            cfg,
            attest_policy: AttestPolicy::default(),
            sealing_key,
            seal_counter: 0,
            view: 0,
            low_watermark: 0,
            stable_ckpt: None,
            bodies: BTreeMap::new(),
            commits: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            last_exec: 0,
            last_rep: BTreeMap::new(),
            app,
            chkpts: BTreeMap::new(),
            sessions: BTreeMap::new(),
            pending_fetch: None,
        }
    }

    pub fn with_attest_policy(mut self, policy: AttestPolicy) -> Self {
        self.attest_policy = policy;
        self
    }

    fn me(&self) -> ReplicaId {
        self.keys.id().replica
    }

    /// Handler: PrePrepare copy carrying full request bodies.
    fn on_preprepare(&mut self, pp: PrePrepare) -> Effects {
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
        if !in_window(pp.n, self.low_watermark, self.cfg.window) {
            return fx;
        }
        let d = pp.digest();
        self.bodies.entry(pp.n).or_default().entry(d).or_insert(pp.batch);
        self.try_execute(&mut fx);
        fx
    }

    /// Handler: Commit votes; execution advances strictly in sequence order
    /// once a quorum and the matching body are present.
    fn on_commit(&mut self, c: Commit) -> Effects {
        let mut fx = Effects::none();
        let signer = EnclaveId::new(c.i, CompartmentKind::Confirmation);
        if self
            .registry
            .verify(signer, &c.signed_bytes(), &c.sig)
            .is_err()
        {
            return fx;
        }
        if !in_window(c.n, self.low_watermark, self.cfg.window) {
            return fx;
        }
        self.commits.entry((c.v, c.n)).or_default().insert(c.i, c);
        self.try_execute(&mut fx);
        fx
    }

    fn quorum_for(&self, n: SeqNo) -> Option<Digest> {
        for ((_, seq), senders) in &self.commits {
            if *seq != n {
                continue;
            }
            let members: Vec<Commit> = senders.values().cloned().collect();
            if let Ok(q) = assemble_commit_quorum(&members, &self.cfg) {
                return Some(q.d);
            }
        }
        None
    }

    fn try_execute(&mut self, fx: &mut Effects) {
        loop {
            let n = self.last_exec + 1;
            let Some(d) = self.quorum_for(n) else {
                return;
            };
            let Some(batch) = self.bodies.get(&n).and_then(|m| m.get(&d)).cloned() else {
                // Missing request body: stall until the PrePrepare copy
                // arrives (the broker's liveness duty).
                return;
            };
            for req in &batch {
                self.execute_request(req, fx);
            }
            self.last_exec = n;
            fx.executed.push((n, d));
            if self.last_exec % self.cfg.checkpoint_interval == 0 {
                self.take_checkpoint(fx);
            }
        }
    }

    fn execute_request(&mut self, req: &crate::messages::Request, fx: &mut Effects) {
        if req.is_noop() {
            return;
        }
        // Timestamp rule: execute strictly newer, retransmit equal, skip older.
        match self.last_rep.get(&req.c) {
            Some(cached) if req.t < cached.t => return,
            Some(cached) if req.t == cached.t => {
                let reply = self.cached_reply(req.c);
                fx.to_client(req.c, Message::Reply(reply));
                return;
            }
            _ => {}
        }

        let me = self.me();
        let Some(session) = self.sessions.get_mut(&req.c) else {
            // No session: cannot authenticate or decrypt; consume as no-op.
            return;
        };
        let authentic = req
            .mac_for(me)
            .map(|tag| crate::crypto::mac_verify(&session.mac_key, &req.mac_input(), tag))
            .unwrap_or(false);
        let plaintext = if authentic {
            session.open_op(&req.op_ciphertext).ok()
        } else {
            None
        };
        // Corrupted or tampered operations execute as a no-op; the sequence
        // slot is still consumed.
        let result_plain = match plaintext {
            Some(op) => self.app.apply(&op),
            None => crate::app::noop_result(),
        };
        let (result, app_effects) = (result_plain.result, result_plain.blocks);
        for (index, sealed) in app_effects {
            fx.persists.push(PersistEffect::LedgerBlock { index, sealed });
        }

        let session = self.sessions.get_mut(&req.c).expect("session checked above");
        let result_ciphertext = session.seal_result(me, &result);
        let mut reply = Reply {
            v: self.view,
            t: req.t,
            c: req.c,
            i: me,
            result_ciphertext,
            auth: Vec::new(),
        };
        reply.auth = crate::crypto::reply_mac(&session.mac_key, &reply.mac_input());
        self.last_rep.insert(
            req.c,
            CachedReply {
                t: req.t,
                result_digest: Digest::of(&result),
                result_plain: result,
                sealed: Some(reply.clone()),
            },
        );
        fx.to_client(req.c, Message::Reply(reply));
    }

    /// Byte-identical retransmission; replies restored from a snapshot are
    /// re-sealed once and then cached.
    fn cached_reply(&mut self, c: ClientId) -> Reply {
        let me = self.me();
        let view = self.view;
        let cached = self.last_rep.get_mut(&c).expect("caller checked presence");
        if let Some(reply) = &cached.sealed {
            return reply.clone();
        }
        let session = self.sessions.get_mut(&c).expect("cached reply implies session");
        let result_ciphertext = session.seal_result(me, &cached.result_plain);
        let mut reply = Reply {
            v: view,
            t: cached.t,
            c,
            i: me,
            result_ciphertext,
            auth: Vec::new(),
        };
        reply.auth = crate::crypto::reply_mac(&session.mac_key, &reply.mac_input());
        cached.sealed = Some(reply.clone());
        reply
    }

    /// Handler (8): snapshot the application and reply cache, emit the
    /// Checkpoint message and hand the sealed snapshot to the environment.
    fn take_checkpoint(&mut self, fx: &mut Effects) {
        let n = self.last_exec;
        let d = self.snapshot_digest();
        let body = self.snapshot_body();
        let sealed = seal_blob(&self.sealing_key, self.me(), self.seal_counter, &body);
        self.seal_counter += 1;

        let mut blob = Writer::new();
        blob.u64(n);
        blob.digest(&d);
        blob.bytes(&sealed);
        let blob = blob.finish();

        self.chkpts.insert(n, blob.clone());
        fx.persists.push(PersistEffect::Snapshot { n, sealed: blob });

        let mut ckpt = Checkpoint {
            v: self.view,
            n,
            d,
            i: self.me(),
            sig: Vec::new(),
        };
        ckpt.sig = self.keys.sign(&ckpt.signed_bytes());
        fx.broadcast(Message::Checkpoint(ckpt));
    }

    /// Deterministic digest over (application state, reply cache): equal on
    /// every correct replica at the same sequence.
    fn snapshot_digest(&self) -> Digest {
        let mut w = Writer::new();
        w.u8(DOMAIN_SNAPSHOT);
        w.digest(&self.app.digest());
        w.u32(self.last_rep.len() as u32);
        for (c, cached) in &self.last_rep {
            w.u64(*c);
            w.u64(cached.t);
            w.digest(&cached.result_digest);
        }
        Digest::of(w.as_slice())
    }

    fn snapshot_body(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.app.snapshot());
        w.u32(self.last_rep.len() as u32);
        for (c, cached) in &self.last_rep {
            w.u64(*c);
            w.u64(cached.t);
            w.bytes(&cached.result_plain);
        }
        w.finish()
    }

    fn restore_snapshot_body(&mut self, body: &[u8]) -> Result<(), ()> {
        let mut r = Reader::new(body);
        let app_bytes = r.bytes().map_err(|_| ())?;
        self.app.restore(&app_bytes).map_err(|_| ())?;
        let count = r.u32().map_err(|_| ())?;
        let mut last_rep = BTreeMap::new();
        for _ in 0..count {
            let c = r.u64().map_err(|_| ())?;
            let t = r.u64().map_err(|_| ())?;
            let result_plain = r.bytes().map_err(|_| ())?;
            last_rep.insert(
                c,
                CachedReply {
                    t,
                    result_digest: Digest::of(&result_plain),
                    result_plain,
                    sealed: None,
                },
            );
        }
        self.last_rep = last_rep;
        Ok(())
    }

    /// Handler (9): duplicated checkpoint collection and GC; also notices
    /// when the cluster moved past us and asks for a state transfer.
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
            Ok(cert) => self.apply_checkpoint_cert(&cert, &mut fx),
            Err(AssembleError::Conflict { v, n, d1, d2 }) => {
                fx.evidence.push(Evidence::CertificateConflict { v, n, d1, d2 });
            }
            Err(AssembleError::Insufficient) => {}
        }
        fx
    }

    fn apply_checkpoint_cert(&mut self, cert: &CheckpointCertificate, fx: &mut Effects) {
        if cert.n <= self.low_watermark {
            return;
        }
        self.low_watermark = cert.n;
        self.stable_ckpt = Some(cert.clone());
        let n = cert.n;
        self.bodies.retain(|seq, _| *seq > n);
        self.commits.retain(|(_, seq), _| *seq > n);
        self.checkpoints.retain(|seq, _| *seq > n);
        // Retain only the certified snapshot and later ones.
        self.chkpts.retain(|seq, _| *seq >= n);
        if cert.n > self.last_exec {
            self.request_state_transfer(cert.n, cert.d, fx);
        }
    }

    fn request_state_transfer(&mut self, n: SeqNo, d: Digest, fx: &mut Effects) {
        if let Some(blob) = self.chkpts.get(&n).cloned() {
            if self.install_snapshot(n, d, &blob) {
                return;
            }
        }
        self.pending_fetch = Some((n, d));
        fx.fetch_snapshot = Some((n, d));
    }

    fn install_snapshot(&mut self, n: SeqNo, expected: Digest, blob: &[u8]) -> bool {
        let mut r = Reader::new(blob);
        let Ok(header_n) = r.u64() else { return false };
        let Ok(_claimed) = r.digest() else { return false };
        let Ok(sealed) = r.bytes() else { return false };
        if header_n != n {
            return false;
        }
        let Ok(body) = open_blob(&self.sealing_key, &sealed) else {
            return false;
        };
        // Restore, then recompute the digest from the restored state and
        // hold it against the certificate.
        if self.restore_snapshot_body(&body).is_err() {
            return false;
        }
        if self.snapshot_digest() != expected {
            return false;
        }
        self.last_exec = n;
        self.pending_fetch = None;
        true
    }

    /// Handler: sealed snapshot bytes arrive from the environment.
    fn on_snapshot_data(&mut self, n: SeqNo, sealed: Vec<u8>) -> Effects {
        let mut fx = Effects::none();
        let Some((want_n, want_d)) = self.pending_fetch else {
            return fx;
        };
        if n != want_n {
            return fx;
        }
        if !self.install_snapshot(want_n, want_d, &sealed) {
            fx.evidence.push(Evidence::SnapshotMismatch { n });
            // Re-request; the environment should try another peer.
            fx.fetch_snapshot = Some((want_n, want_d));
            return fx;
        }
        self.try_execute(&mut fx);
        fx
    }

    /// Handler (7'): view and checkpoint sync from a NewView; re-issued
    /// PrePrepares are not validated here.
    fn on_newview_sync(&mut self, nv: NewView) -> Effects {
        let mut fx = Effects::none();
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
        let cert = nv.ckpt.clone();
        if cert.n > self.low_watermark {
            self.apply_checkpoint_cert(&cert, &mut fx);
        } else if cert.n > self.last_exec {
            self.request_state_transfer(cert.n, cert.d, &mut fx);
        }
        fx
    }

    fn validate_newview_proof(&self, nv: &NewView) -> bool {
        if nv.proof.len() != self.cfg.quorum() {
            return false;
        }
        let mut senders = std::collections::BTreeSet::new();
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

    fn on_session_install(&mut self, offer: crate::crypto::AttestOffer) -> Effects {
        let mut fx = Effects::none();
        let client = offer.client;
        match enclave_accept_offer(&self.keys, &self.registry, &self.attest_policy, &offer) {
            Ok(SessionMaterial {
                mac_key,
                s_enc: Some(s_enc),
            }) => {
                self.sessions.insert(client, ExecSession::new(mac_key, s_enc));
                fx.attest_response = Some((client, Ok(())));
            }
            Ok(_) => {
                fx.attest_response = Some((client, Err(crate::crypto::AttestError::Tampered)));
            }
            Err(e) => {
                fx.attest_response = Some((client, Err(e)));
            }
        }
        fx
    }

    pub fn last_exec(&self) -> SeqNo {
        self.last_exec
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn app_digest(&self) -> Digest {
        self.app.digest()
    }

    #[cfg(test)]
    pub(crate) fn install_session(&mut self, client: ClientId, session: ExecSession) {
        self.sessions.insert(client, session);
    }
}

impl Compartment for Execution {
    fn kind(&self) -> CompartmentKind {
        CompartmentKind::Execution
    }

    fn replica(&self) -> ReplicaId {
        self.me()
    }

    fn handle(&mut self, event: EnclaveEvent) -> Effects {
        match event {
            EnclaveEvent::Protocol(Message::PrePrepare(pp)) => self.on_preprepare(pp),
            EnclaveEvent::Protocol(Message::Commit(c)) => self.on_commit(c),
            EnclaveEvent::Protocol(Message::Checkpoint(c)) => self.on_checkpoint(c),
            EnclaveEvent::Protocol(Message::NewView(nv)) => self.on_newview_sync(nv),
            EnclaveEvent::SnapshotData { n, sealed } => self.on_snapshot_data(n, sealed),
            EnclaveEvent::SessionInstall(offer) => self.on_session_install(offer),
            EnclaveEvent::PersistAck { index } => {
                self.app.ack_persist(index);
                Effects::none()
            }
            _ => Effects::none(),
        }
    }

    fn status(&self) -> CompartmentStatus {
        CompartmentStatus {
            view: self.view,
            low_watermark: self.low_watermark,
            log_entries: self.bodies.values().map(|m| m.len()).sum::<usize>()
                + self.commits.values().map(|m| m.len()).sum::<usize>()
                + self.checkpoints.values().map(|m| m.len()).sum::<usize>(),
            last_exec: Some(self.last_exec),
        }
    }

    fn scan_state(&self, _sink: &mut dyn FnMut(&[u8])) {
        // Execution legitimately holds plaintext; the confidentiality
        // checker does not scan it.
    }

    fn amnesia_reset(&mut self) {
        let dummy = EnclaveKeyPair::from_seed(self.keys.id(), b"amnesia-dummy");
        let keys = std::mem::replace(&mut self.keys, dummy);
        let sessions = std::mem::take(&mut self.sessions);
        let app = self.app.fresh();
        let policy = self.attest_policy.clone();
        *self = Execution::new(
            keys,
            self.registry.clone(),
            self.cfg.clone(),
            self.sealing_key,
            app,
        )
        .with_attest_policy(policy);
        self.sessions = sessions;
    }
}
