//! Per-handler behavior of the three compartments.

mod common;

use bulkhead::compartment::{Compartment, EnclaveEvent, Evidence};
use bulkhead::messages::{CheckpointCertificate, Message, NewView, Request};
use bulkhead::digest::Digest;
use common::*;

// ---------------------------------------------------------------------------
// Preparation
// ---------------------------------------------------------------------------

#[test]
fn primary_assigns_sequence_and_emits_preprepare() {
    let bed = TestBed::new();
    let mut prep = bed.preparation(0);
    let batch = vec![bed.request(1, b"op-a"), bed.request(2, b"op-b")];
    let fx = prep.handle(EnclaveEvent::RequestBatch(batch.clone()));
    let pps = outbound_of(&fx, "PrePrepare");
    assert_eq!(pps.len(), 1);
    match pps[0] {
        Message::PrePrepare(pp) => {
            assert_eq!((pp.v, pp.n), (0, 1));
            assert_eq!(pp.batch.len(), 2);
        }
        _ => unreachable!(),
    }
    // Next batch gets the next sequence, no gaps.
    let fx = prep.handle(EnclaveEvent::RequestBatch(vec![bed.request(3, b"op-c")]));
    match outbound_of(&fx, "PrePrepare")[0] {
        Message::PrePrepare(pp) => assert_eq!(pp.n, 2),
        _ => unreachable!(),
    }
}

#[test]
fn backup_forwards_requests_to_primary() {
    let bed = TestBed::new();
    let mut prep = bed.preparation(2);
    let fx = prep.handle(EnclaveEvent::RequestBatch(vec![bed.request(1, b"op")]));
    assert!(outbound_of(&fx, "PrePrepare").is_empty());
    let fwd = outbound_of(&fx, "Request");
    assert_eq!(fwd.len(), 1);
    assert_eq!(
        fx.out[0].dest,
        bulkhead::compartment::Dest::Replica(0),
        "forwarded toward the view primary"
    );
}

#[test]
fn invalid_mac_requests_filtered_from_batch() {
    let bed = TestBed::new();
    let mut prep = bed.preparation(0);
    let good = bed.request(1, b"good");
    let mut bad = bed.request(2, b"bad");
    bad.auth[0].tag[5] ^= 1; // replica 0's tag mangled
    let fx = prep.handle(EnclaveEvent::RequestBatch(vec![good, bad]));
    match outbound_of(&fx, "PrePrepare")[0] {
        Message::PrePrepare(pp) => {
            assert_eq!(pp.batch.len(), 1, "bad-MAC request dropped at intake");
            assert_eq!(pp.batch[0].t, 1);
        }
        _ => unreachable!(),
    }
    // An all-invalid batch yields no output at all.
    let mut all_bad = bed.request(3, b"x");
    all_bad.auth.clear();
    let fx = prep.handle(EnclaveEvent::RequestBatch(vec![all_bad]));
    assert!(fx.out.is_empty());
}

#[test]
fn window_full_reports_backpressure() {
    let bed = TestBed::new();
    let mut prep = bed.preparation(0);
    // Window is 200; burn through it one batch per sequence.
    for t in 1..=200u64 {
        let fx = prep.handle(EnclaveEvent::RequestBatch(vec![bed.request(t, b"op")]));
        assert!(!fx.backpressure, "sequence {t} still inside the window");
    }
    let fx = prep.handle(EnclaveEvent::RequestBatch(vec![bed.request(201, b"op")]));
    assert!(fx.backpressure);
    assert!(outbound_of(&fx, "PrePrepare").is_empty());
}

#[test]
fn backup_prepares_fresh_preprepare() {
    let bed = TestBed::new();
    let mut prep = bed.preparation(1);
    let pp = bed.preprepare(0, 1, vec![bed.request(1, b"op")]);
    let d = pp.digest();
    let fx = prep.handle(protocol(Message::PrePrepare(pp)));
    match outbound_of(&fx, "Prepare")[0] {
        Message::Prepare(p) => {
            assert_eq!((p.v, p.n, p.d, p.i), (0, 1, d, 1));
        }
        _ => unreachable!(),
    }
}

#[test]
fn equivocating_preprepare_ignored_with_evidence() {
    let bed = TestBed::new();
    let mut prep = bed.preparation(1);
    let pp1 = bed.preprepare(0, 1, vec![bed.request(1, b"one")]);
    let pp2 = bed.preprepare(0, 1, vec![bed.request(1, b"two")]);
    prep.handle(protocol(Message::PrePrepare(pp1)));
    let fx = prep.handle(protocol(Message::PrePrepare(pp2)));
    assert!(outbound_of(&fx, "Prepare").is_empty(), "no second prepare");
    assert!(matches!(
        fx.evidence.as_slice(),
        [Evidence::Equivocation { v: 0, n: 1, .. }]
    ));
}

#[test]
fn preprepare_outside_window_ignored() {
    let bed = TestBed::new();
    let mut prep = bed.preparation(1);
    // Advance the watermark to 100 with a checkpoint certificate.
    let cert = bed.checkpoint_cert(100, Digest::of(b"snap"));
    for c in &cert.checkpoints {
        prep.handle(protocol(Message::Checkpoint(c.clone())));
    }
    let fx = prep.handle(protocol(Message::PrePrepare(
        bed.preprepare(0, 90, vec![bed.request(1, b"late")]),
    )));
    assert!(
        fx.out.is_empty(),
        "pre-watermark message dropped even though it arrived later"
    );
    // Wrong view is equally ignored.
    let fx = prep.handle(protocol(Message::PrePrepare(
        bed.preprepare(1, 101, vec![bed.request(2, b"wrong view")]),
    )));
    assert!(fx.out.is_empty());
}

#[test]
fn quorum_of_viewchanges_yields_newview_at_new_primary() {
    let bed = TestBed::new();
    let mut prep = bed.preparation(1); // primary of view 1
    let cert7 = bed.prepare_cert(0, 7, vec![bed.request(1, b"seven")]);
    let d7 = cert7.digest();

    let vc0 = bed.genesis_vc(1, vec![], 0);
    let vc2 = bed.genesis_vc(1, vec![cert7], 2);
    let vc3 = bed.genesis_vc(1, vec![], 3);

    let fx = prep.handle(protocol(Message::ViewChange(vc0)));
    assert!(outbound_of(&fx, "NewView").is_empty(), "below quorum");
    let fx = prep.handle(protocol(Message::ViewChange(vc2)));
    assert!(outbound_of(&fx, "NewView").is_empty(), "still below quorum");
    let fx = prep.handle(protocol(Message::ViewChange(vc3)));
    let nvs = outbound_of(&fx, "NewView");
    assert_eq!(nvs.len(), 1);
    match nvs[0] {
        Message::NewView(nv) => {
            assert_eq!(nv.v, 1);
            // Sequence 7 reissued with the same digest; 1..=6 noop-filled.
            assert_eq!(nv.preprepares.len(), 7);
            assert_eq!(nv.preprepares[6].n, 7);
            assert_eq!(nv.preprepares[6].digest(), d7);
            assert!(nv.preprepares[0].batch[0].is_noop());
        }
        _ => unreachable!(),
    }
    assert_eq!(prep.view(), 1);
}

#[test]
fn valid_newview_adopted_with_prepares() {
    let bed = TestBed::new();
    let mut prep = bed.preparation(2);
    let proof = vec![
        bed.genesis_vc(1, vec![bed.prepare_cert(0, 1, vec![bed.request(1, b"a")])], 0),
        bed.genesis_vc(1, vec![bed.prepare_cert(0, 2, vec![bed.request(2, b"b")])], 2),
        bed.genesis_vc(1, vec![], 3),
    ];
    let nv = bed.newview(1, proof);
    let fx = prep.handle(protocol(Message::NewView(nv)));
    let prepares = outbound_of(&fx, "Prepare");
    assert_eq!(prepares.len(), 2, "one prepare per reissued sequence");
    assert!(prepares.iter().all(|m| matches!(m, Message::Prepare(p) if p.v == 1)));
    assert_eq!(prep.view(), 1);
}

#[test]
fn forged_newview_rejected_by_preparation() {
    let bed = TestBed::new();
    let mut prep = bed.preparation(2);
    let proof = vec![
        bed.genesis_vc(1, vec![bed.prepare_cert(0, 1, vec![bed.request(1, b"a")])], 0),
        bed.genesis_vc(1, vec![], 2),
        bed.genesis_vc(1, vec![], 3),
    ];
    let mut nv = bed.newview(1, proof);
    // Forge: replace the reissued batch, breaking the digest derivation.
    let primary_keys = bed.keys.enclave_keys(bulkhead::config::EnclaveId::new(
        1,
        bulkhead::config::CompartmentKind::Preparation,
    ));
    nv.preprepares[0].batch = vec![Request::noop()];
    nv.preprepares[0].sig = primary_keys.sign(&nv.preprepares[0].signed_bytes());
    nv.sig = primary_keys.sign(&nv.signed_bytes());

    let fx = prep.handle(protocol(Message::NewView(nv)));
    assert!(outbound_of(&fx, "Prepare").is_empty(), "no prepares");
    assert!(matches!(
        fx.evidence.as_slice(),
        [Evidence::InvalidNewView { v: 1, .. }]
    ));
    assert_eq!(prep.view(), 0, "view not adopted in Preparation");
}

#[test]
fn newview_with_stale_checkpoint_still_adopts_view() {
    let bed = TestBed::new();
    let mut prep = bed.preparation(2);
    // Local watermark already at 100.
    let cert = bed.checkpoint_cert(100, Digest::of(b"snap"));
    for c in &cert.checkpoints {
        prep.handle(protocol(Message::Checkpoint(c.clone())));
    }
    assert_eq!(prep.status().low_watermark, 100);
    // NewView whose quorum knows nothing past genesis.
    let proof = vec![
        bed.genesis_vc(1, vec![], 0),
        bed.genesis_vc(1, vec![], 2),
        bed.genesis_vc(1, vec![], 3),
    ];
    let nv = bed.newview(1, proof);
    let fx = prep.handle(protocol(Message::NewView(nv)));
    assert!(fx.evidence.is_empty());
    assert_eq!(prep.view(), 1, "view adopted");
    assert_eq!(prep.status().low_watermark, 100, "checkpoint ignored");
}

#[test]
fn checkpoint_cert_purges_preparation_log() {
    let bed = TestBed::new();
    let mut prep = bed.preparation(0);
    for t in 1..=120u64 {
        prep.handle(EnclaveEvent::RequestBatch(vec![bed.request(t, b"op")]));
    }
    let full = prep.status().log_entries;
    assert!(full >= 120);
    let cert = bed.checkpoint_cert(100, Digest::of(b"s"));
    for c in &cert.checkpoints {
        prep.handle(protocol(Message::Checkpoint(c.clone())));
    }
    assert_eq!(prep.status().low_watermark, 100);
    let after = prep.status().log_entries;
    assert!(after <= 20, "entries at n <= 100 purged, {after} left");

    // A stale certificate afterwards is a no-op.
    let stale = bed.checkpoint_cert(50, Digest::of(b"old"));
    for c in &stale.checkpoints {
        prep.handle(protocol(Message::Checkpoint(c.clone())));
    }
    assert_eq!(prep.status().low_watermark, 100);
}

// ---------------------------------------------------------------------------
// Confirmation
// ---------------------------------------------------------------------------

#[test]
fn prepare_certificate_gates_commit() {
    let bed = TestBed::new();
    let mut conf = bed.confirmation(3);
    let pp = bed.preprepare(0, 1, vec![bed.request(1, b"op")]);
    let d = pp.digest();
    let fx = conf.handle(protocol(Message::PrePrepare(pp)));
    assert!(outbound_of(&fx, "Commit").is_empty());
    let fx = conf.handle(protocol(Message::Prepare(bed.prepare(0, 1, d, 1))));
    assert!(outbound_of(&fx, "Commit").is_empty(), "one prepare short");
    let fx = conf.handle(protocol(Message::Prepare(bed.prepare(0, 1, d, 2))));
    let commits = outbound_of(&fx, "Commit");
    assert_eq!(commits.len(), 1);
    match commits[0] {
        Message::Commit(c) => assert_eq!((c.v, c.n, c.d, c.i), (0, 1, d, 3)),
        _ => unreachable!(),
    }
    // Single-commit rule: more prepares never re-emit.
    let fx = conf.handle(protocol(Message::Prepare(bed.prepare(0, 1, d, 3))));
    assert!(outbound_of(&fx, "Commit").is_empty());
}

#[test]
fn prepares_without_preprepare_copy_never_commit() {
    let bed = TestBed::new();
    let mut conf = bed.confirmation(0);
    let d = Digest::of(b"phantom");
    for i in [1, 2, 3] {
        let fx = conf.handle(protocol(Message::Prepare(bed.prepare(0, 1, d, i))));
        assert!(outbound_of(&fx, "Commit").is_empty());
    }
}

#[test]
fn split_prepares_never_commit() {
    // Exhaustive digest-split enumeration at n=4: the primary proposes one
    // digest; however the three backups split between it and a second
    // digest, a commit only happens when 2f match the proposal.
    let bed = TestBed::new();
    for assign in 0..(1 << 3) {
        let mut conf = bed.confirmation(0);
        let pp = bed.preprepare(0, 1, vec![bed.request(1, b"real")]);
        let d_real = pp.digest();
        let d_other = Digest::of(b"other");
        conf.handle(protocol(Message::PrePrepare(pp)));
        let mut commits = 0;
        let mut matching = 0;
        for (bit, i) in [1u32, 2, 3].iter().enumerate() {
            let d = if (assign >> bit) & 1 == 0 {
                matching += 1;
                d_real
            } else {
                d_other
            };
            let fx = conf.handle(protocol(Message::Prepare(bed.prepare(0, 1, d, *i))));
            commits += outbound_of(&fx, "Commit").len();
        }
        assert_eq!(
            commits > 0,
            matching >= 2,
            "assign={assign:03b}: commit iff 2f prepares match the PrePrepare"
        );
    }
}

#[test]
fn trigger_emits_viewchange_with_certificates_then_refuses_old_view() {
    let bed = TestBed::new();
    let mut conf = bed.confirmation(3);
    // Two certified slots.
    for n in [1u64, 2] {
        let pp = bed.preprepare(0, n, vec![bed.request(n, b"op")]);
        let d = pp.digest();
        conf.handle(protocol(Message::PrePrepare(pp)));
        conf.handle(protocol(Message::Prepare(bed.prepare(0, n, d, 1))));
        conf.handle(protocol(Message::Prepare(bed.prepare(0, n, d, 2))));
    }
    let fx = conf.handle(EnclaveEvent::ViewChangeTrigger { suspected_view: 0 });
    let vcs = outbound_of(&fx, "ViewChange");
    assert_eq!(vcs.len(), 1);
    match vcs[0] {
        Message::ViewChange(vc) => {
            assert_eq!(vc.new_view, 1);
            assert_eq!(vc.prepare_certs.len(), 2, "all certified slots carried");
            assert!(vc.ckpt.is_genesis());
        }
        _ => unreachable!(),
    }
    assert_eq!(conf.view(), 1);

    // Stale trigger ignored.
    let fx = conf.handle(EnclaveEvent::ViewChangeTrigger { suspected_view: 0 });
    assert!(fx.out.is_empty());

    // Prepares for the old view are no longer processed.
    let pp = bed.preprepare(0, 3, vec![bed.request(9, b"late")]);
    let d = pp.digest();
    conf.handle(protocol(Message::PrePrepare(pp)));
    for i in [1, 2] {
        let fx = conf.handle(protocol(Message::Prepare(bed.prepare(0, 3, d, i))));
        assert!(outbound_of(&fx, "Commit").is_empty(), "old view is dead here");
    }
}

#[test]
fn newview_sync_adopts_view_without_validating_preprepares() {
    let bed = TestBed::new();
    let mut conf = bed.confirmation(2);
    let proof = vec![
        bed.genesis_vc(1, vec![bed.prepare_cert(0, 1, vec![bed.request(1, b"a")])], 0),
        bed.genesis_vc(1, vec![], 2),
        bed.genesis_vc(1, vec![], 3),
    ];
    let mut nv = bed.newview(1, proof);
    // Forge the embedded PrePrepares; the proof remains valid.
    let primary_keys = bed.keys.enclave_keys(bulkhead::config::EnclaveId::new(
        1,
        bulkhead::config::CompartmentKind::Preparation,
    ));
    nv.preprepares[0].batch = vec![Request::noop()];
    nv.preprepares[0].sig = primary_keys.sign(&nv.preprepares[0].signed_bytes());
    nv.sig = primary_keys.sign(&nv.signed_bytes());

    conf.handle(protocol(Message::NewView(nv)));
    assert_eq!(conf.view(), 1, "view adopted despite forged PrePrepares");
}

#[test]
fn newview_with_invalid_proof_rejected() {
    let bed = TestBed::new();
    let mut conf = bed.confirmation(2);
    // Only two distinct senders in the proof.
    let proof = vec![
        bed.genesis_vc(1, vec![], 0),
        bed.genesis_vc(1, vec![], 0),
        bed.genesis_vc(1, vec![], 3),
    ];
    let nv = bed.newview(1, proof);
    conf.handle(protocol(Message::NewView(nv)));
    assert_eq!(conf.view(), 0);

    // Mutated ViewChange signature inside the proof.
    let mut vc = bed.genesis_vc(1, vec![], 0);
    vc.sig[10] ^= 1;
    let proof = vec![vc, bed.genesis_vc(1, vec![], 2), bed.genesis_vc(1, vec![], 3)];
    let nv = bed.newview(1, proof);
    conf.handle(protocol(Message::NewView(nv)));
    assert_eq!(conf.view(), 0);
}

#[test]
fn confirmation_gc_drops_purged_slots_forever() {
    let bed = TestBed::new();
    let mut conf = bed.confirmation(0);
    let pp = bed.preprepare(0, 5, vec![bed.request(1, b"x")]);
    conf.handle(protocol(Message::PrePrepare(pp)));
    assert!(conf.status().log_entries > 0);
    let cert = bed.checkpoint_cert(100, Digest::of(b"s"));
    for c in &cert.checkpoints {
        conf.handle(protocol(Message::Checkpoint(c.clone())));
    }
    assert_eq!(conf.status().low_watermark, 100);
    assert_eq!(conf.status().log_entries, 0, "in_conf purged");

    // A replayed pre-watermark Prepare is dropped inside the enclave.
    let fx = conf.handle(protocol(Message::Prepare(bed.prepare(
        0,
        90,
        Digest::of(b"re"),
        1,
    ))));
    assert!(fx.out.is_empty());
    assert_eq!(conf.status().log_entries, 0);
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

fn commit_quorum_for(bed: &TestBed, exec: &mut bulkhead::compartment::Execution, v: u64, n: u64, d: Digest) -> bulkhead::compartment::Effects {
    let mut last = exec.handle(protocol(Message::Commit(bed.commit(v, n, d, 0))));
    for i in [1, 2] {
        last = exec.handle(protocol(Message::Commit(bed.commit(v, n, d, i))));
    }
    last
}

#[test]
fn commit_quorum_with_body_executes_and_replies() {
    let bed = TestBed::new();
    let mut exec = bed.execution(0);
    let op = bulkhead::app::KvsOp::Put {
        key: b"k".to_vec(),
        value: b"v".to_vec(),
    };
    let pp = bed.preprepare(0, 1, vec![bed.request(1, &op.encode())]);
    let d = pp.digest();
    exec.handle(protocol(Message::PrePrepare(pp)));
    let fx = commit_quorum_for(&bed, &mut exec, 0, 1, d);
    assert_eq!(exec.last_exec(), 1);
    assert_eq!(fx.executed, vec![(1, d)]);
    let replies = outbound_of(&fx, "Reply");
    assert_eq!(replies.len(), 1);
}

#[test]
fn gap_holds_execution() {
    let bed = TestBed::new();
    let mut exec = bed.execution(0);
    let pp = bed.preprepare(0, 2, vec![bed.request(1, b"ahead")]);
    let d = pp.digest();
    exec.handle(protocol(Message::PrePrepare(pp)));
    let fx = commit_quorum_for(&bed, &mut exec, 0, 2, d);
    assert_eq!(exec.last_exec(), 0, "n=2 held until n=1 executes");
    assert!(fx.executed.is_empty());
}

#[test]
fn missing_body_stalls_until_preprepare_copy_arrives() {
    let bed = TestBed::new();
    let mut exec = bed.execution(0);
    let pp = bed.preprepare(0, 1, vec![bed.request(1, b"late body")]);
    let d = pp.digest();
    let fx = commit_quorum_for(&bed, &mut exec, 0, 1, d);
    assert_eq!(exec.last_exec(), 0);
    assert!(fx.executed.is_empty());
    let fx = exec.handle(protocol(Message::PrePrepare(pp)));
    assert_eq!(exec.last_exec(), 1, "body arrival unblocks execution");
    assert_eq!(fx.executed.len(), 1);
}

#[test]
fn tampered_request_executes_as_noop_but_consumes_sequence() {
    let bed = TestBed::new();
    let mut exec = bed.execution(0);
    let mut req = bed.request(1, b"will be mangled");
    let len = req.op_ciphertext.len();
    req.op_ciphertext[len - 1] ^= 1;
    // Re-MAC so the request authenticates; only the AEAD fails.
    let input = req.mac_input();
    req.auth = (0..4)
        .map(|r| bulkhead::messages::MacEntry {
            replica: r,
            tag: bulkhead::crypto::mac_tag(&bed.mac_keys[r as usize], &input),
        })
        .collect();
    let pp = bed.preprepare(0, 1, vec![req]);
    let d = pp.digest();
    exec.handle(protocol(Message::PrePrepare(pp)));
    let fx = commit_quorum_for(&bed, &mut exec, 0, 1, d);
    assert_eq!(exec.last_exec(), 1, "sequence consumed");
    let replies = outbound_of(&fx, "Reply");
    assert_eq!(replies.len(), 1, "client still learns its op was a no-op");
    assert_eq!(exec.app_digest(), bed.execution(1).app_digest(), "app untouched");
}

#[test]
fn duplicate_timestamp_reemits_cached_reply_byte_identically() {
    let bed = TestBed::new();
    let mut exec = bed.execution(0);
    let op = bulkhead::app::KvsOp::Put {
        key: b"k".to_vec(),
        value: b"v".to_vec(),
    };
    let req = bed.request(1, &op.encode());
    let pp = bed.preprepare(0, 1, vec![req.clone()]);
    let d = pp.digest();
    exec.handle(protocol(Message::PrePrepare(pp)));
    let fx = commit_quorum_for(&bed, &mut exec, 0, 1, d);
    let first = match outbound_of(&fx, "Reply")[0] {
        Message::Reply(r) => r.clone(),
        _ => unreachable!(),
    };
    let digest_before = exec.app_digest();

    // The same request ordered again at the next sequence.
    let pp2 = bed.preprepare(0, 2, vec![req]);
    let d2 = pp2.digest();
    exec.handle(protocol(Message::PrePrepare(pp2)));
    let fx = commit_quorum_for(&bed, &mut exec, 0, 2, d2);
    let second = match outbound_of(&fx, "Reply")[0] {
        Message::Reply(r) => r.clone(),
        _ => unreachable!(),
    };
    assert_eq!(first.encode(), second.encode(), "byte-identical retransmission");
    assert_eq!(exec.app_digest(), digest_before, "app not re-applied");
    assert_eq!(exec.last_exec(), 2);
}

#[test]
fn stale_timestamp_skipped() {
    let bed = TestBed::new();
    let mut exec = bed.execution(0);
    let newer = bed.request(5, &bulkhead::app::KvsOp::Put { key: b"a".to_vec(), value: b"5".to_vec() }.encode());
    let pp = bed.preprepare(0, 1, vec![newer]);
    let d = pp.digest();
    exec.handle(protocol(Message::PrePrepare(pp)));
    commit_quorum_for(&bed, &mut exec, 0, 1, d);

    let older = bed.request(3, &bulkhead::app::KvsOp::Put { key: b"a".to_vec(), value: b"3".to_vec() }.encode());
    let pp2 = bed.preprepare(0, 2, vec![older]);
    let d2 = pp2.digest();
    exec.handle(protocol(Message::PrePrepare(pp2)));
    let fx = commit_quorum_for(&bed, &mut exec, 0, 2, d2);
    assert!(outbound_of(&fx, "Reply").is_empty(), "older timestamp ignored");
    assert_eq!(exec.last_exec(), 2);
}

#[test]
fn checkpoint_taken_on_interval() {
    let bed = TestBed::new();
    let mut cfg = bed.cfg.clone();
    cfg.checkpoint_interval = 2;
    cfg.window = 10;
    let id = bulkhead::config::EnclaveId::new(0, bulkhead::config::CompartmentKind::Execution);
    let mut exec = bulkhead::compartment::Execution::new(
        bed.keys.enclave_keys(id),
        bed.keys.registry.clone(),
        cfg,
        bed.keys.exec_sealing,
        Box::new(bulkhead::app::KvStore::new()),
    );
    bed.install_exec_session(&mut exec, 0);

    let mut checkpoints = Vec::new();
    for n in 1..=3u64 {
        let pp = bed.preprepare(0, n, vec![bed.request(n, b"op")]);
        let d = pp.digest();
        exec.handle(protocol(Message::PrePrepare(pp)));
        let fx = commit_quorum_for(&bed, &mut exec, 0, n, d);
        checkpoints.extend(outbound_of(&fx, "Checkpoint").into_iter().cloned());
    }
    assert_eq!(checkpoints.len(), 1, "one checkpoint at n=2, none at 1 or 3");
    match &checkpoints[0] {
        Message::Checkpoint(c) => assert_eq!(c.n, 2),
        _ => unreachable!(),
    }
}

/// Drive an execution enclave through 100 sequences; returns the Checkpoint
/// it emitted at n=100.
fn run_to_checkpoint(
    bed: &TestBed,
    exec: &mut bulkhead::compartment::Execution,
) -> bulkhead::messages::Checkpoint {
    let mut emitted = None;
    for n in 1..=100u64 {
        let pp = bed.preprepare(0, n, vec![bed.request(n, b"same history")]);
        let d = pp.digest();
        exec.handle(protocol(Message::PrePrepare(pp)));
        let fx = commit_quorum_for(bed, exec, 0, n, d);
        for m in outbound_of(&fx, "Checkpoint") {
            if let Message::Checkpoint(c) = m {
                emitted = Some(c.clone());
            }
        }
    }
    emitted.expect("checkpoint at n=100")
}

#[test]
fn checkpoint_digests_agree_across_replicas() {
    let bed = TestBed::new();
    let mut exec_a = bed.execution(0);
    let mut exec_b = bed.execution(3);
    let cp_a = run_to_checkpoint(&bed, &mut exec_a);
    let cp_b = run_to_checkpoint(&bed, &mut exec_b);
    assert_eq!(cp_a.n, 100);
    assert_eq!(cp_a.d, cp_b.d, "identical histories, identical digests");
}

#[test]
fn execution_gc_purges_and_drops_late_messages() {
    let bed = TestBed::new();
    let mut exec = bed.execution(0);
    let own_cp = run_to_checkpoint(&bed, &mut exec);
    assert!(exec.status().log_entries > 0);

    // Quorum of matching checkpoints (ours plus two peers) advances the
    // watermark and purges everything at or below it.
    exec.handle(protocol(Message::Checkpoint(own_cp.clone())));
    for i in [1u32, 2] {
        exec.handle(protocol(Message::Checkpoint(bed.checkpoint(0, 100, own_cp.d, i))));
    }
    assert_eq!(exec.status().low_watermark, 100);
    assert_eq!(exec.status().log_entries, 0);

    // Replayed pre-watermark Commit: dropped inside the enclave forever.
    let fx = exec.handle(protocol(Message::Commit(bed.commit(0, 90, Digest::of(b"re"), 1))));
    assert!(fx.out.is_empty());
    assert_eq!(exec.status().log_entries, 0);
}

// ---------------------------------------------------------------------------
// Execution: view sync and state transfer
// ---------------------------------------------------------------------------

/// Checkpoint certificate and sealed snapshot from a replica that executed
/// 100 sequences.
fn checkpointed_peer(bed: &TestBed) -> (CheckpointCertificate, Vec<u8>) {
    let mut peer = bed.execution(3);
    let mut snapshot = None;
    for n in 1..=100u64 {
        let pp = bed.preprepare(0, n, vec![bed.request(n, b"same history")]);
        let d = pp.digest();
        peer.handle(protocol(Message::PrePrepare(pp)));
        let fx = commit_quorum_for(bed, &mut peer, 0, n, d);
        for p in &fx.persists {
            if let bulkhead::compartment::PersistEffect::Snapshot { sealed, .. } = p {
                snapshot = Some(sealed.clone());
            }
        }
    }
    let snapshot = snapshot.expect("snapshot persisted at n=100");
    // Reconstruct the digest from the emitted checkpoint.
    let mut peer2 = bed.execution(3);
    let cp = run_to_checkpoint(bed, &mut peer2);
    (bed.checkpoint_cert(100, cp.d), snapshot)
}

fn newview_with_ckpt(bed: &TestBed, v: u64, ckpt: CheckpointCertificate) -> NewView {
    let proof = vec![
        bed.viewchange(v, ckpt.clone(), vec![], 0),
        bed.viewchange(v, ckpt.clone(), vec![], 2),
        bed.viewchange(v, ckpt, vec![], 3),
    ];
    bed.newview(v, proof)
}

#[test]
fn newview_checkpoint_ahead_installs_snapshot_via_state_transfer() {
    let bed = TestBed::new();
    let (cert, snapshot) = checkpointed_peer(&bed);
    let expect_digest = cert.d;

    let mut exec = bed.execution(0);
    assert_eq!(exec.last_exec(), 0);
    let nv = newview_with_ckpt(&bed, 1, cert);
    let fx = exec.handle(protocol(Message::NewView(nv)));
    assert_eq!(exec.view(), 1);
    assert_eq!(
        fx.fetch_snapshot,
        Some((100, expect_digest)),
        "no local snapshot: environment asked to fetch one"
    );

    let fx = exec.handle(EnclaveEvent::SnapshotData {
        n: 100,
        sealed: snapshot,
    });
    assert!(fx.evidence.is_empty());
    assert_eq!(exec.last_exec(), 100, "snapshot installed");
    // State now matches the peer that produced it.
    let mut peer = bed.execution(3);
    run_to_checkpoint(&bed, &mut peer);
    assert_eq!(exec.app_digest(), peer.app_digest());
}

#[test]
fn newview_checkpoint_behind_updates_view_only() {
    let bed = TestBed::new();
    let mut exec = bed.execution(0);
    // Execute past the certificate's sequence first.
    for n in 1..=10u64 {
        let pp = bed.preprepare(0, n, vec![bed.request(n, b"op")]);
        let d = pp.digest();
        exec.handle(protocol(Message::PrePrepare(pp)));
        commit_quorum_for(&bed, &mut exec, 0, n, d);
    }
    let nv = newview_with_ckpt(&bed, 1, CheckpointCertificate::genesis(Digest::ZERO));
    let fx = exec.handle(protocol(Message::NewView(nv)));
    assert_eq!(exec.view(), 1);
    assert_eq!(exec.last_exec(), 10, "no state transfer");
    assert!(fx.fetch_snapshot.is_none());
}

#[test]
fn mutated_snapshot_rejected_and_refetched() {
    let bed = TestBed::new();
    let (cert, snapshot) = checkpointed_peer(&bed);
    let mut exec = bed.execution(0);
    let nv = newview_with_ckpt(&bed, 1, cert);
    exec.handle(protocol(Message::NewView(nv)));

    let mut mangled = snapshot.clone();
    let idx = mangled.len() / 2;
    mangled[idx] ^= 1;
    let fx = exec.handle(EnclaveEvent::SnapshotData {
        n: 100,
        sealed: mangled,
    });
    assert!(matches!(
        fx.evidence.as_slice(),
        [Evidence::SnapshotMismatch { n: 100 }]
    ));
    assert!(matches!(fx.fetch_snapshot, Some((100, _))), "re-requested");
    assert_eq!(exec.last_exec(), 0);

    // The intact snapshot still installs afterwards.
    let fx = exec.handle(EnclaveEvent::SnapshotData {
        n: 100,
        sealed: snapshot,
    });
    assert!(fx.evidence.is_empty());
    assert_eq!(exec.last_exec(), 100);
}
