//! Shared new-view computation.
//!
//! The incoming primary derives the re-issued PrePrepares from the prepare
//! certificates inside a ViewChange quorum; validating replicas repeat the
//! same derivation and compare. Determinism rules: the stable checkpoint is
//! the highest certified one, per sequence the certificate from the highest
//! view wins, and a (byzantine-only) view tie is broken toward the smaller
//! digest. Gaps up to the highest prepared sequence are filled with no-ops.

use std::collections::BTreeMap;

use crate::digest::Digest;
use crate::messages::{CheckpointCertificate, Request, ViewChange};

/// What a NewView must contain, independent of who computes it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewViewPlan {
    pub ckpt: CheckpointCertificate,
    /// `(sequence, batch)` in ascending sequence order, contiguous from
    /// `ckpt.n + 1` to the highest prepared sequence.
    pub slots: Vec<(u64, Vec<Request>)>,
}

pub fn compute_new_view(quorum: &[ViewChange]) -> NewViewPlan {
    let ckpt = quorum
        .iter()
        .map(|vc| &vc.ckpt)
        .max_by_key(|c| c.n)
        .cloned()
        .unwrap_or_else(|| CheckpointCertificate::genesis(Digest::ZERO));

    // Per sequence, the winning certificate: highest view, then smallest
    // digest.
    let mut best: BTreeMap<u64, (u64, Digest, Vec<Request>)> = BTreeMap::new();
    for vc in quorum {
        for cert in &vc.prepare_certs {
            let n = cert.n();
            if n <= ckpt.n {
                continue;
            }
            let candidate = (cert.v(), cert.digest(), cert.preprepare.batch.clone());
            match best.get(&n) {
                Some((v, d, _))
                    if *v > candidate.0 || (*v == candidate.0 && *d <= candidate.1) => {}
                _ => {
                    best.insert(n, candidate);
                }
            }
        }
    }

    let max_n = best.keys().max().copied().unwrap_or(ckpt.n);
    let mut slots = Vec::new();
    for n in ckpt.n + 1..=max_n {
        match best.remove(&n) {
            Some((_, _, batch)) => slots.push((n, batch)),
            None => slots.push((n, vec![Request::noop()])),
        }
    }
    NewViewPlan { ckpt, slots }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messages::{batch_digest, PrePrepare, Prepare, PrepareCertificate};

    fn req(t: u64) -> Request {
        Request {
            op_ciphertext: vec![t as u8; 4],
            t,
            c: 1,
            auth: Vec::new(),
        }
    }

    fn cert(v: u64, n: u64, batch: Vec<Request>) -> PrepareCertificate {
        let d = batch_digest(&batch);
        PrepareCertificate {
            preprepare: PrePrepare {
                v,
                n,
                batch,
                sig: vec![0; 64],
            },
            prepares: (1..=2)
                .map(|i| Prepare {
                    v,
                    n,
                    d,
                    i,
                    sig: vec![0; 64],
                })
                .collect(),
        }
    }

    fn vc(new_view: u64, ckpt_n: u64, certs: Vec<PrepareCertificate>, i: u32) -> ViewChange {
        ViewChange {
            new_view,
            ckpt: if ckpt_n == 0 {
                CheckpointCertificate::genesis(Digest::ZERO)
            } else {
                CheckpointCertificate {
                    n: ckpt_n,
                    d: Digest::of(b"snap"),
                    checkpoints: Vec::new(),
                }
            },
            prepare_certs: certs,
            i,
            sig: vec![0; 64],
        }
    }

    #[test]
    fn covers_prepared_sequences_and_fills_gaps() {
        let quorum = vec![
            vc(1, 0, vec![cert(0, 2, vec![req(5)])], 0),
            vc(1, 0, vec![cert(0, 4, vec![req(9)])], 1),
            vc(1, 0, vec![], 2),
        ];
        let plan = compute_new_view(&quorum);
        assert_eq!(plan.ckpt.n, 0);
        let seqs: Vec<u64> = plan.slots.iter().map(|(n, _)| *n).collect();
        assert_eq!(seqs, vec![1, 2, 3, 4]);
        assert!(plan.slots[0].1[0].is_noop(), "gap at 1 filled with no-op");
        assert_eq!(plan.slots[1].1[0].t, 5);
        assert!(plan.slots[2].1[0].is_noop(), "gap at 3 filled with no-op");
        assert_eq!(plan.slots[3].1[0].t, 9);
    }

    #[test]
    fn higher_view_certificate_wins() {
        let old = cert(0, 2, vec![req(5)]);
        let newer = cert(1, 2, vec![req(7)]);
        let quorum = vec![
            vc(2, 0, vec![old], 0),
            vc(2, 0, vec![newer.clone()], 1),
            vc(2, 0, vec![], 2),
        ];
        let plan = compute_new_view(&quorum);
        assert_eq!(batch_digest(&plan.slots[1].1), newer.digest());
    }

    #[test]
    fn sequences_at_or_below_checkpoint_are_dropped() {
        let quorum = vec![
            vc(1, 100, vec![], 0),
            vc(1, 0, vec![cert(0, 50, vec![req(1)])], 1),
            vc(1, 0, vec![], 2),
        ];
        let plan = compute_new_view(&quorum);
        assert_eq!(plan.ckpt.n, 100);
        assert!(plan.slots.is_empty());
    }

    #[test]
    fn empty_quorum_certs_yield_empty_plan() {
        let quorum = vec![vc(1, 0, vec![], 0), vc(1, 0, vec![], 1), vc(1, 0, vec![], 2)];
        let plan = compute_new_view(&quorum);
        assert!(plan.slots.is_empty());
    }

    #[test]
    fn derivation_is_deterministic() {
        let quorum = vec![
            vc(1, 0, vec![cert(0, 1, vec![req(3)])], 0),
            vc(1, 0, vec![cert(0, 2, vec![req(4)])], 1),
            vc(1, 0, vec![cert(0, 1, vec![req(3)])], 3),
        ];
        assert_eq!(compute_new_view(&quorum), compute_new_view(&quorum));
    }
}
