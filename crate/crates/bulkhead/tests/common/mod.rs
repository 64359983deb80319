//! Shared fixtures for compartment-level tests: a keyed 4-replica cluster
//! and constructors for properly signed protocol messages.

#![allow(dead_code)]

use bulkhead::app::KvStore;
use bulkhead::compartment::{
    Compartment, Confirmation, EnclaveEvent, Execution, Preparation,
};
use bulkhead::config::{ClientId, CompartmentKind, Config, EnclaveId, ReplicaId};
use bulkhead::crypto::{
    attest_offer, mac_tag, ClusterKeys, SessionMaterial,
};
use bulkhead::digest::Digest;
use bulkhead::messages::{
    batch_digest, Checkpoint, CheckpointCertificate, Commit, MacEntry, Message, NewView,
    PrePrepare, Prepare, PrepareCertificate, Request, ViewChange,
};

pub const CLIENT: ClientId = 100;

pub struct TestBed {
    pub keys: ClusterKeys,
    pub cfg: Config,
    pub mac_keys: Vec<[u8; 32]>,
    pub s_enc: [u8; 32],
}

impl TestBed {
    pub fn new() -> TestBed {
        let cfg = Config::for_faults(1);
        TestBed {
            keys: ClusterKeys::bootstrap(99, cfg.n, &[CLIENT]),
            cfg,
            mac_keys: (0..4).map(|r| [r as u8 + 1; 32]).collect(),
            s_enc: [0x55; 32],
        }
    }

    pub fn preparation(&self, replica: ReplicaId) -> Preparation {
        let id = EnclaveId::new(replica, CompartmentKind::Preparation);
        let mut p = Preparation::new(
            self.keys.enclave_keys(id),
            self.keys.registry.clone(),
            self.cfg.clone(),
        );
        self.install_prep_session(&mut p, replica);
        p
    }

    pub fn confirmation(&self, replica: ReplicaId) -> Confirmation {
        let id = EnclaveId::new(replica, CompartmentKind::Confirmation);
        Confirmation::new(
            self.keys.enclave_keys(id),
            self.keys.registry.clone(),
            self.cfg.clone(),
        )
    }

    pub fn execution(&self, replica: ReplicaId) -> Execution {
        let id = EnclaveId::new(replica, CompartmentKind::Execution);
        let mut e = Execution::new(
            self.keys.enclave_keys(id),
            self.keys.registry.clone(),
            self.cfg.clone(),
            self.keys.exec_sealing,
            Box::new(KvStore::new()),
        );
        self.install_exec_session(&mut e, replica);
        e
    }

    /// Install the client session into a Preparation enclave through the
    /// real attestation stub.
    pub fn install_prep_session(&self, p: &mut Preparation, replica: ReplicaId) {
        let target = EnclaveId::new(replica, CompartmentKind::Preparation);
        let offer = attest_offer(
            &self.keys.client_keys(CLIENT),
            target,
            self.keys.registry.attest_public(target).unwrap(),
            [replica as u8 + 40; 32],
            &SessionMaterial {
                mac_key: self.mac_keys[replica as usize],
                s_enc: None,
            },
        )
        .unwrap();
        let fx = p.handle(EnclaveEvent::SessionInstall(offer));
        assert!(matches!(fx.attest_response, Some((_, Ok(())))));
    }

    pub fn install_exec_session(&self, e: &mut Execution, replica: ReplicaId) {
        let target = EnclaveId::new(replica, CompartmentKind::Execution);
        let offer = attest_offer(
            &self.keys.client_keys(CLIENT),
            target,
            self.keys.registry.attest_public(target).unwrap(),
            [replica as u8 + 80; 32],
            &SessionMaterial {
                mac_key: self.mac_keys[replica as usize],
                s_enc: Some(self.s_enc),
            },
        )
        .unwrap();
        let fx = e.handle(EnclaveEvent::SessionInstall(offer));
        assert!(matches!(fx.attest_response, Some((_, Ok(())))));
    }

    /// A sealed, fully MAC'd client request.
    pub fn request(&self, t: u64, op_plain: &[u8]) -> Request {
        let mut sealer = bulkhead::crypto::ClientSealer::new(self.s_enc);
        // Distinct nonces per t: advance the counter deterministically.
        for _ in 0..t {
            sealer.seal_op(b"skip");
        }
        let mut req = Request {
            op_ciphertext: sealer.seal_op(op_plain),
            t,
            c: CLIENT,
            auth: Vec::new(),
        };
        let input = req.mac_input();
        req.auth = (0..self.cfg.n)
            .map(|r| MacEntry {
                replica: r,
                tag: mac_tag(&self.mac_keys[r as usize], &input),
            })
            .collect();
        req
    }

    pub fn preprepare(&self, v: u64, n: u64, batch: Vec<Request>) -> PrePrepare {
        let primary = self.cfg.primary_of(v);
        let kp = self
            .keys
            .enclave_keys(EnclaveId::new(primary, CompartmentKind::Preparation));
        let mut pp = PrePrepare {
            v,
            n,
            batch,
            sig: Vec::new(),
        };
        pp.sig = kp.sign(&pp.signed_bytes());
        pp
    }

    pub fn prepare(&self, v: u64, n: u64, d: Digest, i: ReplicaId) -> Prepare {
        let kp = self
            .keys
            .enclave_keys(EnclaveId::new(i, CompartmentKind::Preparation));
        let mut p = Prepare {
            v,
            n,
            d,
            i,
            sig: Vec::new(),
        };
        p.sig = kp.sign(&p.signed_bytes());
        p
    }

    pub fn commit(&self, v: u64, n: u64, d: Digest, i: ReplicaId) -> Commit {
        let kp = self
            .keys
            .enclave_keys(EnclaveId::new(i, CompartmentKind::Confirmation));
        let mut c = Commit {
            v,
            n,
            d,
            i,
            sig: Vec::new(),
        };
        c.sig = kp.sign(&c.signed_bytes());
        c
    }

    pub fn checkpoint(&self, v: u64, n: u64, d: Digest, i: ReplicaId) -> Checkpoint {
        let kp = self
            .keys
            .enclave_keys(EnclaveId::new(i, CompartmentKind::Execution));
        let mut c = Checkpoint {
            v,
            n,
            d,
            i,
            sig: Vec::new(),
        };
        c.sig = kp.sign(&c.signed_bytes());
        c
    }

    pub fn checkpoint_cert(&self, n: u64, d: Digest) -> CheckpointCertificate {
        CheckpointCertificate {
            n,
            d,
            checkpoints: (0..3).map(|i| self.checkpoint(0, n, d, i)).collect(),
        }
    }

    pub fn prepare_cert(&self, v: u64, n: u64, batch: Vec<Request>) -> PrepareCertificate {
        let pp = self.preprepare(v, n, batch);
        let d = pp.digest();
        let primary = self.cfg.primary_of(v);
        let backups: Vec<ReplicaId> = (0..self.cfg.n).filter(|r| *r != primary).collect();
        PrepareCertificate {
            prepares: backups[..2].iter().map(|i| self.prepare(v, n, d, *i)).collect(),
            preprepare: pp,
        }
    }

    pub fn viewchange(
        &self,
        new_view: u64,
        ckpt: CheckpointCertificate,
        certs: Vec<PrepareCertificate>,
        i: ReplicaId,
    ) -> ViewChange {
        let kp = self
            .keys
            .enclave_keys(EnclaveId::new(i, CompartmentKind::Confirmation));
        let mut vc = ViewChange {
            new_view,
            ckpt,
            prepare_certs: certs,
            i,
            sig: Vec::new(),
        };
        vc.sig = kp.sign(&vc.signed_bytes());
        vc
    }

    pub fn genesis_vc(&self, new_view: u64, certs: Vec<PrepareCertificate>, i: ReplicaId) -> ViewChange {
        self.viewchange(new_view, CheckpointCertificate::genesis(Digest::ZERO), certs, i)
    }

    /// Build a valid NewView for `v` the way the incoming primary would.
    pub fn newview(&self, v: u64, proof: Vec<ViewChange>) -> NewView {
        let plan = bulkhead::compartment::compute_new_view(&proof);
        let primary = self.cfg.primary_of(v);
        let kp = self
            .keys
            .enclave_keys(EnclaveId::new(primary, CompartmentKind::Preparation));
        let preprepares = plan
            .slots
            .iter()
            .map(|(n, batch)| {
                let mut pp = PrePrepare {
                    v,
                    n: *n,
                    batch: batch.clone(),
                    sig: Vec::new(),
                };
                pp.sig = kp.sign(&pp.signed_bytes());
                pp
            })
            .collect();
        let mut nv = NewView {
            v,
            proof,
            preprepares,
            ckpt: plan.ckpt,
            sig: Vec::new(),
        };
        nv.sig = kp.sign(&nv.signed_bytes());
        nv
    }
}

pub fn protocol(msg: Message) -> EnclaveEvent {
    EnclaveEvent::Protocol(msg)
}

/// Messages of one kind among an effects value's outbound list.
pub fn outbound_of<'a>(
    fx: &'a bulkhead::compartment::Effects,
    kind: &str,
) -> Vec<&'a Message> {
    fx.out
        .iter()
        .map(|o| &o.msg)
        .filter(|m| m.kind_name() == kind)
        .collect()
}

pub fn batch_d(reqs: &[Request]) -> Digest {
    batch_digest(reqs)
}
