//! Quorum certificate assembly and validation.
//!
//! Compartments act only on certificates, never on single messages from
//! another compartment. Assembly is deterministic: when more messages
//! qualify than the threshold needs, the members with the lowest replica
//! ids are selected, so certificates are reproducible across runs.
//! Conflicting certificates (same view and sequence, different digests) are
//! surfaced as equivocation evidence, never silently resolved.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::config::{CompartmentKind, Config, EnclaveId, ReplicaId, SeqNo, View};
use crate::digest::Digest;
use crate::messages::{
    Checkpoint, CheckpointCertificate, Commit, Message, Prepare, PrepareCertificate, ViewChange,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertificateKind {
    PrepareCert,
    CommitQuorum,
    CheckpointCert,
    ViewChangeQuorum,
}

/// A commit quorum: `2f + 1` Commits equal on `(v, n, d)` from distinct
/// replicas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitQuorum {
    pub v: View,
    pub n: SeqNo,
    pub d: Digest,
    pub commits: Vec<Commit>,
}

/// `2f + 1` ViewChanges for the same view from distinct replicas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewChangeQuorum {
    pub view: View,
    pub viewchanges: Vec<ViewChange>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Certificate {
    Prepare(PrepareCertificate),
    Commit(CommitQuorum),
    Checkpoint(CheckpointCertificate),
    ViewChange(ViewChangeQuorum),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AssembleError {
    /// No qualifying subset among the candidates.
    #[error("insufficient matching messages for a certificate")]
    Insufficient,
    /// Two complete certificates with the same (v, n) but different digests;
    /// equivocation evidence for the harness.
    #[error("conflicting certificates at v={v} n={n}: {d1} vs {d2}")]
    Conflict {
        v: View,
        n: SeqNo,
        d1: Digest,
        d2: Digest,
    },
}

/// Assemble a certificate of the given kind from individually
/// signature-verified candidates.
pub fn assemble(
    kind: CertificateKind,
    candidates: &[Message],
    cfg: &Config,
) -> Result<Certificate, AssembleError> {
    match kind {
        CertificateKind::PrepareCert => {
            let preprepares: Vec<_> = candidates
                .iter()
                .filter_map(|m| match m {
                    Message::PrePrepare(pp) => Some(pp.clone()),
                    _ => None,
                })
                .collect();
            let prepares: Vec<_> = candidates
                .iter()
                .filter_map(|m| match m {
                    Message::Prepare(p) => Some(p.clone()),
                    _ => None,
                })
                .collect();
            assemble_prepare_cert(&preprepares, &prepares, cfg).map(Certificate::Prepare)
        }
        CertificateKind::CommitQuorum => {
            let commits: Vec<_> = candidates
                .iter()
                .filter_map(|m| match m {
                    Message::Commit(c) => Some(c.clone()),
                    _ => None,
                })
                .collect();
            assemble_commit_quorum(&commits, cfg).map(Certificate::Commit)
        }
        CertificateKind::CheckpointCert => {
            let ckpts: Vec<_> = candidates
                .iter()
                .filter_map(|m| match m {
                    Message::Checkpoint(c) => Some(c.clone()),
                    _ => None,
                })
                .collect();
            assemble_checkpoint_cert(&ckpts, cfg).map(Certificate::Checkpoint)
        }
        CertificateKind::ViewChangeQuorum => {
            let vcs: Vec<_> = candidates
                .iter()
                .filter_map(|m| match m {
                    Message::ViewChange(vc) => Some(vc.clone()),
                    _ => None,
                })
                .collect();
            assemble_viewchange_quorum(&vcs, cfg).map(Certificate::ViewChange)
        }
    }
}

/// Lowest-id deduplication: keep the first message per replica, then take
/// the `threshold` lowest replica ids.
fn select_lowest<T: Clone>(
    items: &[T],
    replica_of: impl Fn(&T) -> ReplicaId,
    threshold: usize,
) -> Option<Vec<T>> {
    let mut by_replica: BTreeMap<ReplicaId, T> = BTreeMap::new();
    for it in items {
        by_replica.entry(replica_of(it)).or_insert_with(|| it.clone());
    }
    if by_replica.len() < threshold {
        return None;
    }
    Some(by_replica.into_values().take(threshold).collect())
}

/// One PrePrepare plus `2f` matching Prepares from `2f + 1` distinct
/// replicas (the PrePrepare counts as the primary's vote).
pub fn assemble_prepare_cert(
    preprepares: &[crate::messages::PrePrepare],
    prepares: &[Prepare],
    cfg: &Config,
) -> Result<PrepareCertificate, AssembleError> {
    // Group by (v, n); within each group collect completions per digest.
    let mut groups: BTreeMap<(View, SeqNo), Vec<PrepareCertificate>> = BTreeMap::new();
    let mut keys: BTreeSet<(View, SeqNo)> = BTreeSet::new();
    for pp in preprepares {
        keys.insert((pp.v, pp.n));
    }
    for (v, n) in keys {
        let primary = cfg.primary_of(v);
        let mut digests: BTreeSet<Digest> = BTreeSet::new();
        for pp in preprepares.iter().filter(|pp| pp.v == v && pp.n == n) {
            digests.insert(pp.digest());
        }
        for d in digests {
            let Some(pp) = preprepares
                .iter()
                .find(|pp| pp.v == v && pp.n == n && pp.digest() == d)
            else {
                continue;
            };
            let matching: Vec<Prepare> = prepares
                .iter()
                .filter(|p| p.v == v && p.n == n && p.d == d && p.i != primary)
                .cloned()
                .collect();
            if let Some(selected) = select_lowest(&matching, |p| p.i, 2 * cfg.f as usize) {
                groups.entry((v, n)).or_default().push(PrepareCertificate {
                    preprepare: pp.clone(),
                    prepares: selected,
                });
            }
        }
    }
    let mut found: Option<PrepareCertificate> = None;
    for ((v, n), certs) in groups {
        if certs.len() > 1 {
            return Err(AssembleError::Conflict {
                v,
                n,
                d1: certs[0].digest(),
                d2: certs[1].digest(),
            });
        }
        if found.is_none() {
            found = certs.into_iter().next();
        }
    }
    found.ok_or(AssembleError::Insufficient)
}

pub fn assemble_commit_quorum(
    commits: &[Commit],
    cfg: &Config,
) -> Result<CommitQuorum, AssembleError> {
    let mut complete: BTreeMap<(View, SeqNo), Vec<CommitQuorum>> = BTreeMap::new();
    let mut digests_by_slot: BTreeMap<(View, SeqNo), BTreeSet<Digest>> = BTreeMap::new();
    for c in commits {
        digests_by_slot.entry((c.v, c.n)).or_default().insert(c.d);
    }
    for ((v, n), digests) in digests_by_slot {
        for d in digests {
            let matching: Vec<Commit> = commits
                .iter()
                .filter(|c| c.v == v && c.n == n && c.d == d)
                .cloned()
                .collect();
            if let Some(selected) = select_lowest(&matching, |c| c.i, cfg.quorum()) {
                complete.entry((v, n)).or_default().push(CommitQuorum {
                    v,
                    n,
                    d,
                    commits: selected,
                });
            }
        }
    }
    let mut found: Option<CommitQuorum> = None;
    for ((v, n), quorums) in complete {
        if quorums.len() > 1 {
            return Err(AssembleError::Conflict {
                v,
                n,
                d1: quorums[0].d,
                d2: quorums[1].d,
            });
        }
        if found.is_none() {
            found = quorums.into_iter().next();
        }
    }
    found.ok_or(AssembleError::Insufficient)
}

/// `2f + 1` Checkpoints matching on `(n, d)`; views may differ.
pub fn assemble_checkpoint_cert(
    checkpoints: &[Checkpoint],
    cfg: &Config,
) -> Result<CheckpointCertificate, AssembleError> {
    let mut complete: BTreeMap<SeqNo, Vec<CheckpointCertificate>> = BTreeMap::new();
    let mut digests_by_n: BTreeMap<SeqNo, BTreeSet<Digest>> = BTreeMap::new();
    for c in checkpoints {
        digests_by_n.entry(c.n).or_default().insert(c.d);
    }
    for (n, digests) in digests_by_n {
        for d in digests {
            let matching: Vec<Checkpoint> = checkpoints
                .iter()
                .filter(|c| c.n == n && c.d == d)
                .cloned()
                .collect();
            if let Some(selected) = select_lowest(&matching, |c| c.i, cfg.quorum()) {
                complete
                    .entry(n)
                    .or_default()
                    .push(CheckpointCertificate {
                        n,
                        d,
                        checkpoints: selected,
                    });
            }
        }
    }
    // Prefer the highest stable sequence; conflicts are equivocation.
    let mut found: Option<CheckpointCertificate> = None;
    for (n, certs) in complete {
        if certs.len() > 1 {
            return Err(AssembleError::Conflict {
                v: 0,
                n,
                d1: certs[0].d,
                d2: certs[1].d,
            });
        }
        found = certs.into_iter().next().or(found);
    }
    found.ok_or(AssembleError::Insufficient)
}

pub fn assemble_viewchange_quorum(
    viewchanges: &[ViewChange],
    cfg: &Config,
) -> Result<ViewChangeQuorum, AssembleError> {
    let mut views: BTreeSet<View> = BTreeSet::new();
    for vc in viewchanges {
        views.insert(vc.new_view);
    }
    for view in views {
        let matching: Vec<ViewChange> = viewchanges
            .iter()
            .filter(|vc| vc.new_view == view)
            .cloned()
            .collect();
        if let Some(selected) = select_lowest(&matching, |vc| vc.i, cfg.quorum()) {
            return Ok(ViewChangeQuorum {
                view,
                viewchanges: selected,
            });
        }
    }
    Err(AssembleError::Insufficient)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CertError {
    #[error("wrong member count: expected {expected}, got {got}")]
    WrongCount { expected: usize, got: usize },
    #[error("duplicate sender replica {0}")]
    DuplicateSender(ReplicaId),
    #[error("member fields do not match the certificate")]
    Mismatch,
    #[error("member from {0} carries an invalid signature")]
    BadMemberSignature(EnclaveId),
    #[error("prepare from the view primary")]
    PrepareFromPrimary,
    #[error("checkpoint sequence {0} is not a checkpoint boundary")]
    NotOnInterval(SeqNo),
    #[error("prepare certificate sequence {n} outside ({low}, {high}]")]
    OutOfWindow { n: SeqNo, low: SeqNo, high: SeqNo },
}

use crate::crypto::KeyRegistry;

/// Validate a prepare certificate including member signatures.
pub fn validate_prepare_cert(
    cert: &PrepareCertificate,
    registry: &KeyRegistry,
    cfg: &Config,
) -> Result<(), CertError> {
    let v = cert.v();
    let n = cert.n();
    let d = cert.digest();
    let primary = cfg.primary_of(v);
    if cert.prepares.len() != 2 * cfg.f as usize {
        return Err(CertError::WrongCount {
            expected: 2 * cfg.f as usize,
            got: cert.prepares.len(),
        });
    }
    registry
        .verify(
            EnclaveId::new(primary, CompartmentKind::Preparation),
            &cert.preprepare.signed_bytes(),
            &cert.preprepare.sig,
        )
        .map_err(|_| {
            CertError::BadMemberSignature(EnclaveId::new(primary, CompartmentKind::Preparation))
        })?;
    let mut seen: BTreeSet<ReplicaId> = BTreeSet::new();
    seen.insert(primary);
    for p in &cert.prepares {
        if p.v != v || p.n != n || p.d != d {
            return Err(CertError::Mismatch);
        }
        if p.i == primary {
            return Err(CertError::PrepareFromPrimary);
        }
        if !seen.insert(p.i) {
            return Err(CertError::DuplicateSender(p.i));
        }
        let id = EnclaveId::new(p.i, CompartmentKind::Preparation);
        registry
            .verify(id, &p.signed_bytes(), &p.sig)
            .map_err(|_| CertError::BadMemberSignature(id))?;
    }
    Ok(())
}

/// Validate a checkpoint certificate. The genesis certificate (`n = 0`,
/// no members) is always valid.
pub fn validate_checkpoint_cert(
    cert: &CheckpointCertificate,
    registry: &KeyRegistry,
    cfg: &Config,
) -> Result<(), CertError> {
    if cert.is_genesis() && cert.checkpoints.is_empty() {
        return Ok(());
    }
    if cert.n % cfg.checkpoint_interval != 0 {
        return Err(CertError::NotOnInterval(cert.n));
    }
    if cert.checkpoints.len() != cfg.quorum() {
        return Err(CertError::WrongCount {
            expected: cfg.quorum(),
            got: cert.checkpoints.len(),
        });
    }
    let mut seen: BTreeSet<ReplicaId> = BTreeSet::new();
    for c in &cert.checkpoints {
        if c.n != cert.n || c.d != cert.d {
            return Err(CertError::Mismatch);
        }
        if !seen.insert(c.i) {
            return Err(CertError::DuplicateSender(c.i));
        }
        let id = EnclaveId::new(c.i, CompartmentKind::Execution);
        registry
            .verify(id, &c.signed_bytes(), &c.sig)
            .map_err(|_| CertError::BadMemberSignature(id))?;
    }
    Ok(())
}

/// Validate a received ViewChange: signature by the sender's Confirmation
/// enclave, a valid checkpoint certificate, and valid prepare certificates
/// in `(ckpt_n, ckpt_n + W]`.
pub fn validate_viewchange(
    vc: &ViewChange,
    registry: &KeyRegistry,
    cfg: &Config,
) -> Result<(), CertError> {
    let id = EnclaveId::new(vc.i, CompartmentKind::Confirmation);
    registry
        .verify(id, &vc.signed_bytes(), &vc.sig)
        .map_err(|_| CertError::BadMemberSignature(id))?;
    validate_checkpoint_cert(&vc.ckpt, registry, cfg)?;
    for pc in &vc.prepare_certs {
        let n = pc.n();
        if n <= vc.ckpt.n || n > vc.ckpt.n + cfg.window {
            return Err(CertError::OutOfWindow {
                n,
                low: vc.ckpt.n,
                high: vc.ckpt.n + cfg.window,
            });
        }
        validate_prepare_cert(pc, registry, cfg)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::ClusterKeys;
    use crate::messages::{PrePrepare, Request};

    fn cluster() -> (ClusterKeys, Config) {
        (ClusterKeys::bootstrap(3, 4, &[]), Config::for_faults(1))
    }

    fn req(t: u64) -> Request {
        Request {
            op_ciphertext: vec![1, 2, t as u8],
            t,
            c: 9,
            auth: Vec::new(),
        }
    }

    fn signed_preprepare(keys: &ClusterKeys, v: View, n: SeqNo, batch: Vec<Request>) -> PrePrepare {
        let cfg = Config::for_faults(1);
        let mut pp = PrePrepare {
            v,
            n,
            batch,
            sig: Vec::new(),
        };
        let kp = keys.enclave_keys(EnclaveId::new(
            cfg.primary_of(v),
            CompartmentKind::Preparation,
        ));
        pp.sig = kp.sign(&pp.signed_bytes());
        pp
    }

    fn signed_prepare(keys: &ClusterKeys, v: View, n: SeqNo, d: Digest, i: ReplicaId) -> Prepare {
        let mut p = Prepare {
            v,
            n,
            d,
            i,
            sig: Vec::new(),
        };
        let kp = keys.enclave_keys(EnclaveId::new(i, CompartmentKind::Preparation));
        p.sig = kp.sign(&p.signed_bytes());
        p
    }

    fn signed_commit(keys: &ClusterKeys, v: View, n: SeqNo, d: Digest, i: ReplicaId) -> Commit {
        let mut c = Commit {
            v,
            n,
            d,
            i,
            sig: Vec::new(),
        };
        let kp = keys.enclave_keys(EnclaveId::new(i, CompartmentKind::Confirmation));
        c.sig = kp.sign(&c.signed_bytes());
        c
    }

    #[test]
    fn preprepare_plus_2f_prepares_forms_cert() {
        let (keys, cfg) = cluster();
        let pp = signed_preprepare(&keys, 0, 1, vec![req(1)]);
        let d = pp.digest();
        let prepares = vec![
            signed_prepare(&keys, 0, 1, d, 1),
            signed_prepare(&keys, 0, 1, d, 2),
        ];
        let cert = assemble_prepare_cert(&[pp], &prepares, &cfg).unwrap();
        assert_eq!(cert.prepares.len(), 2);
        validate_prepare_cert(&cert, &keys.registry, &cfg).unwrap();
    }

    #[test]
    fn three_commits_form_quorum() {
        let (keys, cfg) = cluster();
        let d = Digest::of(b"batch");
        let commits: Vec<Commit> = (0..3).map(|i| signed_commit(&keys, 0, 1, d, i)).collect();
        let q = assemble_commit_quorum(&commits, &cfg).unwrap();
        assert_eq!(q.commits.len(), 3);
    }

    #[test]
    fn two_commits_insufficient() {
        let (keys, cfg) = cluster();
        let d = Digest::of(b"batch");
        let commits: Vec<Commit> = (0..2).map(|i| signed_commit(&keys, 0, 1, d, i)).collect();
        assert_eq!(
            assemble_commit_quorum(&commits, &cfg),
            Err(AssembleError::Insufficient)
        );
    }

    #[test]
    fn duplicate_senders_do_not_count() {
        let (keys, cfg) = cluster();
        let d = Digest::of(b"batch");
        let commits = vec![
            signed_commit(&keys, 0, 1, d, 0),
            signed_commit(&keys, 0, 1, d, 0),
            signed_commit(&keys, 0, 1, d, 1),
        ];
        assert_eq!(
            assemble_commit_quorum(&commits, &cfg),
            Err(AssembleError::Insufficient)
        );
    }

    #[test]
    fn oversupply_selects_lowest_ids() {
        let (keys, cfg) = cluster();
        let d = Digest::of(b"batch");
        let commits: Vec<Commit> = (0..4).map(|i| signed_commit(&keys, 0, 1, d, i)).collect();
        let q = assemble_commit_quorum(&commits, &cfg).unwrap();
        let ids: Vec<ReplicaId> = q.commits.iter().map(|c| c.i).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn conflicting_quorums_surface_as_conflict() {
        let (keys, cfg) = cluster();
        let d1 = Digest::of(b"one");
        let d2 = Digest::of(b"two");
        // Byzantine oversupply: enough commits for both digests (requires
        // double-signing replicas, which is what the evidence captures).
        let mut commits: Vec<Commit> = (0..3).map(|i| signed_commit(&keys, 0, 1, d1, i)).collect();
        commits.extend((0..3).map(|i| signed_commit(&keys, 0, 1, d2, i)));
        assert!(matches!(
            assemble_commit_quorum(&commits, &cfg),
            Err(AssembleError::Conflict { .. })
        ));
    }

    #[test]
    fn prepare_from_primary_is_rejected_by_validation() {
        let (keys, cfg) = cluster();
        let pp = signed_preprepare(&keys, 0, 1, vec![req(1)]);
        let d = pp.digest();
        let cert = PrepareCertificate {
            preprepare: pp,
            prepares: vec![
                signed_prepare(&keys, 0, 1, d, 0), // primary of view 0
                signed_prepare(&keys, 0, 1, d, 1),
            ],
        };
        assert_eq!(
            validate_prepare_cert(&cert, &keys.registry, &cfg),
            Err(CertError::PrepareFromPrimary)
        );
    }

    #[test]
    fn wrong_kind_signature_rejected() {
        let (keys, cfg) = cluster();
        let pp = signed_preprepare(&keys, 0, 1, vec![req(1)]);
        let d = pp.digest();
        // Prepare signed with the sender's Confirmation key instead of its
        // Preparation key: the certificate layer must reject it.
        let mut bad = Prepare {
            v: 0,
            n: 1,
            d,
            i: 1,
            sig: Vec::new(),
        };
        let conf_kp = keys.enclave_keys(EnclaveId::new(1, CompartmentKind::Confirmation));
        bad.sig = conf_kp.sign(&bad.signed_bytes());
        let cert = PrepareCertificate {
            preprepare: pp,
            prepares: vec![bad, signed_prepare(&keys, 0, 1, d, 2)],
        };
        assert!(matches!(
            validate_prepare_cert(&cert, &keys.registry, &cfg),
            Err(CertError::BadMemberSignature(_))
        ));
    }

    #[test]
    fn honest_preparations_cannot_split_a_slot() {
        // Exhaustive small model, n = 4, f = 1: one honest PrePrepare per
        // slot, every assignment of backups to one of two digests. Two valid
        // prepare certificates for the same (v, n) never coexist.
        let (keys, cfg) = cluster();
        let pp1 = signed_preprepare(&keys, 0, 1, vec![req(1)]);
        let pp2 = signed_preprepare(&keys, 0, 1, vec![req(2)]);
        for primary_digest in 0..2usize {
            let pp = if primary_digest == 0 { &pp1 } else { &pp2 };
            let digests = [pp1.digest(), pp2.digest()];
            for assign in 0..(2usize.pow(3)) {
                let prepares: Vec<Prepare> = (0..3)
                    .map(|b| {
                        let backup = (b + 1) as ReplicaId;
                        let d = digests[(assign >> b) & 1];
                        signed_prepare(&keys, 0, 1, d, backup)
                    })
                    .collect();
                match assemble_prepare_cert(std::slice::from_ref(pp), &prepares, &cfg) {
                    Ok(cert) => assert_eq!(cert.digest(), pp.digest()),
                    Err(AssembleError::Insufficient) => {}
                    Err(e) => panic!("unexpected conflict among honest signers: {e}"),
                }
            }
        }
    }

    #[test]
    fn genesis_checkpoint_cert_is_valid() {
        let (keys, cfg) = cluster();
        let cert = CheckpointCertificate::genesis(Digest::of(b"genesis"));
        validate_checkpoint_cert(&cert, &keys.registry, &cfg).unwrap();
    }
}
