//! Safety, linearizability, confidentiality and view-change oracles over
//! collected traces. Every checker is validated by at least one violating
//! control scenario in the test suite, so a PASS is never vacuous.

use std::collections::{BTreeMap, BTreeSet};

use super::linearize::{check_kvs_linearizable, Counterexample, KvsCall};
use super::scenario::CANARY;
use crate::app::{KvsOp, KvsResult};
use crate::config::{ClientId, CompartmentKind, ReplicaId, SeqNo, View};
use crate::digest::Digest;
use crate::trace::{Trace, TraceEvent};

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementViolation {
    pub n: SeqNo,
    pub description: String,
}

#[derive(Debug, Clone, Default)]
pub struct AgreementSummary {
    pub executed_per_replica: BTreeMap<ReplicaId, usize>,
    pub highest_common: SeqNo,
}

/// Prefix consistency of executed sequences across correct Execution
/// enclaves, plus per-slot commit uniqueness across correct Confirmation
/// enclaves (two correct enclaves committing different digests for one slot
/// means two different prepare certificates existed). Returns the minimal
/// divergence point on violation.
pub fn check_agreement(
    trace: &Trace,
    correct_exec: &BTreeSet<ReplicaId>,
    correct_conf: &BTreeSet<ReplicaId>,
) -> Result<AgreementSummary, AgreementViolation> {
    let mut executed: BTreeMap<ReplicaId, BTreeMap<SeqNo, Digest>> = BTreeMap::new();
    let mut commits: BTreeMap<(View, SeqNo), BTreeMap<Digest, ReplicaId>> = BTreeMap::new();

    for rec in trace.iter() {
        match &rec.event {
            TraceEvent::Executed { replica, n, d } if correct_exec.contains(replica) => {
                let slots = executed.entry(*replica).or_default();
                if let Some(prev) = slots.get(n) {
                    if prev != d {
                        return Err(AgreementViolation {
                            n: *n,
                            description: format!(
                                "replica {replica} executed n={n} twice with different digests"
                            ),
                        });
                    }
                }
                slots.insert(*n, *d);
            }
            TraceEvent::Emit { enclave, meta, .. }
                if enclave.kind == CompartmentKind::Confirmation
                    && correct_conf.contains(&enclave.replica)
                    && meta.kind == "Commit" =>
            {
                if let Some(d) = meta.d {
                    commits
                        .entry((meta.v, meta.n))
                        .or_default()
                        .insert(d, enclave.replica);
                }
            }
            _ => {}
        }
    }

    // Commit uniqueness per (view, sequence).
    for ((v, n), digests) in &commits {
        if digests.len() > 1 {
            let who: Vec<String> = digests
                .iter()
                .map(|(d, r)| format!("r{r}:{d}"))
                .collect();
            return Err(AgreementViolation {
                n: *n,
                description: format!(
                    "conflicting commits at v={v} n={n} from correct confirmation enclaves: {}",
                    who.join(" vs ")
                ),
            });
        }
    }

    // Cross-replica prefix consistency.
    let mut canonical: BTreeMap<SeqNo, (Digest, ReplicaId)> = BTreeMap::new();
    for (replica, slots) in &executed {
        for (n, d) in slots {
            match canonical.get(n) {
                Some((d0, r0)) if d0 != d => {
                    return Err(AgreementViolation {
                        n: *n,
                        description: format!(
                            "divergence at n={n}: r{r0} executed {d0}, r{replica} executed {d}"
                        ),
                    });
                }
                Some(_) => {}
                None => {
                    canonical.insert(*n, (*d, *replica));
                }
            }
        }
    }

    let mut summary = AgreementSummary::default();
    for (replica, slots) in &executed {
        summary.executed_per_replica.insert(*replica, slots.len());
    }
    // Highest sequence executed by every correct replica.
    summary.highest_common = executed
        .values()
        .map(|slots| slots.keys().max().copied().unwrap_or(0))
        .min()
        .unwrap_or(0);
    Ok(summary)
}

/// Build the client-observed KVS history from a trace. Retransmissions
/// collapse into one call (dedupe produces one logical operation).
pub fn kvs_history(trace: &Trace) -> Vec<KvsCall> {
    let mut invokes: BTreeMap<(ClientId, u64), (u64, KvsOp)> = BTreeMap::new();
    let mut calls = Vec::new();
    for rec in trace.iter() {
        match &rec.event {
            TraceEvent::ClientSubmit { c, t, op } => {
                if let Some(op) = KvsOp::decode(op) {
                    invokes.entry((*c, *t)).or_insert((rec.tick, op));
                }
            }
            TraceEvent::ClientAccept { c, t, result, .. } => {
                if let Some((invoke, op)) = invokes.remove(&(*c, *t)) {
                    if let Some(result) = KvsResult::decode(result) {
                        calls.push(KvsCall {
                            client: *c,
                            invoke,
                            response: rec.tick,
                            op,
                            result,
                        });
                    }
                }
            }
            _ => {}
        }
    }
    calls
}

/// Linearizability of the KVS client history. Operations that never
/// completed are mutating "maybes": the checker tries every subset of them
/// as linearized-after-the-fact, so lost-but-executed writes cannot produce
/// false alarms.
pub fn check_linearizable(trace: &Trace) -> Result<usize, Counterexample> {
    let history = kvs_history(trace);

    // Pending mutating invocations (no accept seen).
    let mut accepted: BTreeSet<(ClientId, u64)> = BTreeSet::new();
    let mut submits: BTreeMap<(ClientId, u64), (u64, KvsOp)> = BTreeMap::new();
    let mut last_tick = 0;
    for rec in trace.iter() {
        last_tick = rec.tick;
        match &rec.event {
            TraceEvent::ClientSubmit { c, t, op } => {
                if let Some(op) = KvsOp::decode(op) {
                    submits.entry((*c, *t)).or_insert((rec.tick, op));
                }
            }
            TraceEvent::ClientAccept { c, t, .. } => {
                accepted.insert((*c, *t));
            }
            _ => {}
        }
    }
    let pending: Vec<((ClientId, u64), (u64, KvsOp))> = submits
        .into_iter()
        .filter(|(k, (_, op))| !accepted.contains(k) && !matches!(op, KvsOp::Get { .. }))
        .collect();

    if pending.is_empty() {
        return check_kvs_linearizable(&history).map(|()| history.len());
    }
    // Small in practice: closed-loop clients leave at most `outstanding`
    // pending ops each.
    let subsets = 1usize << pending.len().min(12);
    let mut last_err = None;
    for mask in 0..subsets {
        let mut attempt = history.clone();
        for (bit, ((c, _t), (invoke, op))) in pending.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                attempt.push(KvsCall {
                    client: *c,
                    invoke: *invoke,
                    response: last_tick + 1,
                    op: op.clone(),
                    result: match op {
                        KvsOp::Put { .. } => KvsResult::Ok,
                        _ => KvsResult::Noop,
                    },
                });
            }
        }
        match check_kvs_linearizable(&attempt) {
            Ok(()) => return Ok(history.len()),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one subset attempted"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeakSite {
    pub tick: u64,
    pub location: String,
    pub what: &'static str,
}

/// Scan every untrusted byte string — network frames, broker stores, and the
/// final state of non-Execution compartments — for plaintext canaries and
/// for any known secret key material. Zero hits required.
pub fn check_confidentiality(trace: &Trace, secrets: &[Vec<u8>]) -> Result<usize, LeakSite> {
    let mut scanned = 0usize;
    let mut scan = |tick: u64, location: &str, bytes: &[u8]| -> Option<LeakSite> {
        scanned += 1;
        if contains(bytes, &CANARY) {
            return Some(LeakSite {
                tick,
                location: location.to_string(),
                what: "plaintext canary",
            });
        }
        for secret in secrets {
            if !secret.is_empty() && contains(bytes, secret) {
                return Some(LeakSite {
                    tick,
                    location: location.to_string(),
                    what: "secret key material",
                });
            }
        }
        None
    };

    for rec in trace.iter() {
        match &rec.event {
            TraceEvent::NetSend { from, to, bytes, .. } => {
                if let Some(leak) = scan(rec.tick, &format!("frame {from}->{to}"), bytes) {
                    return Err(leak);
                }
            }
            TraceEvent::StateScan { owner, blobs } => {
                for b in blobs {
                    if let Some(leak) = scan(rec.tick, owner, b) {
                        return Err(leak);
                    }
                }
            }
            _ => {}
        }
    }
    Ok(scanned)
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    if needle.is_empty() || haystack.len() < needle.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

#[derive(Debug, Clone, Default)]
pub struct ViewChangeReport {
    pub new_view: View,
    pub newview_emitters: Vec<ReplicaId>,
    /// Replicas whose Preparation rejected a NewView for this view.
    pub rejecting: Vec<ReplicaId>,
    /// Per replica: (prepares emitted in the view, commits emitted in it).
    pub emissions: BTreeMap<ReplicaId, (usize, usize)>,
}

impl ViewChangeReport {
    /// The correctness corner case: a replica whose Preparation rejected the
    /// (forged) NewView sends Commits in the new view but no Prepares.
    pub fn commits_without_prepares(&self, replica: ReplicaId) -> bool {
        match self.emissions.get(&replica) {
            Some((prepares, commits)) => *prepares == 0 && *commits > 0,
            None => false,
        }
    }
}

/// Collect the emission pattern for one view: who produced the NewView, who
/// rejected it, and who sent Prepares/Commits inside the view.
pub fn check_view_change(trace: &Trace, new_view: View) -> ViewChangeReport {
    let mut report = ViewChangeReport {
        new_view,
        ..ViewChangeReport::default()
    };
    for rec in trace.iter() {
        match &rec.event {
            TraceEvent::Emit { enclave, meta, .. } if meta.v == new_view => {
                let entry = report.emissions.entry(enclave.replica).or_insert((0, 0));
                match meta.kind {
                    "Prepare" => entry.0 += 1,
                    "Commit" => entry.1 += 1,
                    "NewView" => {
                        if !report.newview_emitters.contains(&enclave.replica) {
                            report.newview_emitters.push(enclave.replica);
                        }
                    }
                    _ => {}
                }
            }
            TraceEvent::Evidence { enclave, description }
                if description.starts_with("invalid-newview")
                    && description.contains(&format!("v={new_view}")) =>
            {
                if !report.rejecting.contains(&enclave.replica) {
                    report.rejecting.push(enclave.replica);
                }
            }
            _ => {}
        }
    }
    report
}

/// Highest view adopted by any enclave of a replica, per the trace.
pub fn max_view_installed(trace: &Trace) -> View {
    trace
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::Ecall { view, .. } => Some(*view),
            _ => None,
        })
        .max()
        .unwrap_or(0)
}

/// Per-enclave view sequences must be non-decreasing across the whole run.
pub fn check_view_monotonic(trace: &Trace) -> Result<(), String> {
    let mut views: BTreeMap<String, View> = BTreeMap::new();
    for rec in trace.iter() {
        if let TraceEvent::Ecall { enclave, view, .. } = &rec.event {
            let key = enclave.to_string();
            let prev = views.entry(key.clone()).or_insert(0);
            if *view < *prev {
                return Err(format!(
                    "view regression at {key}: {} -> {} (tick {})",
                    prev, view, rec.tick
                ));
            }
            *prev = *view;
        }
    }
    Ok(())
}

/// Largest log size any enclave reported after the given tick.
pub fn max_log_entries_after(trace: &Trace, tick: u64) -> usize {
    trace
        .iter()
        .filter(|r| r.tick >= tick)
        .filter_map(|r| match &r.event {
            TraceEvent::Ecall { log_entries, .. } => Some(*log_entries),
            _ => None,
        })
        .max()
        .unwrap_or(0)
}
