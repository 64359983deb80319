//! Structured run traces.
//!
//! Every routed, sent, or dropped message, every ecall with the enclave's
//! status after it, and every client-visible event becomes one record. The
//! checkers consume the typed records; `to_text` renders one line per record
//! for replay comparison (byte-identical traces for equal seeds) and for
//! grepping.

use crate::config::{ClientId, EnclaveId, ReplicaId, SeqNo, View};
use crate::digest::Digest;
use crate::transport::Addr;

#[derive(Debug, Clone, PartialEq)]
pub struct MsgMeta {
    pub kind: &'static str,
    pub v: View,
    pub n: SeqNo,
    pub d: Option<Digest>,
    pub client: Option<ClientId>,
    pub t: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    ClientSubmit {
        c: ClientId,
        t: u64,
        op: Vec<u8>,
    },
    ClientRetransmit {
        c: ClientId,
        t: u64,
    },
    ClientAccept {
        c: ClientId,
        t: u64,
        result: Vec<u8>,
        votes: usize,
    },
    ClientTimeout {
        c: ClientId,
        t: u64,
    },
    NetSend {
        from: Addr,
        to: Addr,
        bytes: Vec<u8>,
        summary: String,
    },
    NetDrop {
        from: Addr,
        to: Addr,
        summary: String,
        reason: &'static str,
    },
    /// The (possibly byzantine) environment suppressed or mangled something.
    EnvAction {
        replica: ReplicaId,
        action: &'static str,
        summary: String,
    },
    Ecall {
        enclave: EnclaveId,
        event: String,
        outputs: usize,
        view: View,
        low_watermark: SeqNo,
        log_entries: usize,
        last_exec: Option<SeqNo>,
    },
    /// A protocol message left an enclave.
    Emit {
        enclave: EnclaveId,
        meta: MsgMeta,
        dest: String,
    },
    Executed {
        replica: ReplicaId,
        n: SeqNo,
        d: Digest,
    },
    Evidence {
        enclave: EnclaveId,
        description: String,
    },
    Persist {
        replica: ReplicaId,
        kind: &'static str,
        id: u64,
    },
    ViewTrigger {
        replica: ReplicaId,
        suspected: View,
    },
    BatchClosed {
        replica: ReplicaId,
        size: usize,
    },
    /// Final-state dump of a non-Execution compartment or an environment
    /// store, scanned by the confidentiality checker.
    StateScan {
        owner: String,
        blobs: Vec<Vec<u8>>,
    },
    Note {
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub tick: u64,
    pub event: TraceEvent,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, tick: u64, event: TraceEvent) {
        self.records.push(TraceRecord { tick, event });
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter()
    }

    /// One line per record; deterministic for identical runs. Frame and
    /// state bytes are rendered as digests to keep lines bounded.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("{:>10} {}\n", r.tick, render(&r.event)));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn render(e: &TraceEvent) -> String {
    match e {
        TraceEvent::ClientSubmit { c, t, op } => {
            format!("client c{c} submit t={t} op={}", Digest::of(op))
        }
        TraceEvent::ClientRetransmit { c, t } => format!("client c{c} retransmit t={t}"),
        TraceEvent::ClientAccept { c, t, result, votes } => format!(
            "client c{c} accept t={t} result={} votes={votes}",
            Digest::of(result)
        ),
        TraceEvent::ClientTimeout { c, t } => format!("client c{c} TIMEOUT t={t}"),
        TraceEvent::NetSend {
            from,
            to,
            bytes,
            summary,
        } => format!("net {from}->{to} [{summary}] {}B {}", bytes.len(), Digest::of(bytes)),
        TraceEvent::NetDrop {
            from,
            to,
            summary,
            reason,
        } => format!("net {from}->{to} DROP({reason}) [{summary}]"),
        TraceEvent::EnvAction {
            replica,
            action,
            summary,
        } => format!("env r{replica} {action} [{summary}]"),
        TraceEvent::Ecall {
            enclave,
            event,
            outputs,
            view,
            low_watermark,
            log_entries,
            last_exec,
        } => {
            let le = last_exec.map(|n| format!(" last_exec={n}")).unwrap_or_default();
            format!(
                "ecall {enclave} [{event}] out={outputs} view={view} low={low_watermark} log={log_entries}{le}"
            )
        }
        TraceEvent::Emit { enclave, meta, dest } => {
            let d = meta.d.map(|d| format!(" d={d}")).unwrap_or_default();
            let ct = match (meta.client, meta.t) {
                (Some(c), Some(t)) => format!(" c={c} t={t}"),
                _ => String::new(),
            };
            format!(
                "emit {enclave} {} v={} n={}{d}{ct} -> {dest}",
                meta.kind, meta.v, meta.n
            )
        }
        TraceEvent::Executed { replica, n, d } => format!("executed r{replica} n={n} d={d}"),
        TraceEvent::Evidence {
            enclave,
            description,
        } => format!("evidence {enclave} {description}"),
        TraceEvent::Persist { replica, kind, id } => format!("persist r{replica} {kind} {id}"),
        TraceEvent::ViewTrigger { replica, suspected } => {
            format!("view-trigger r{replica} suspected={suspected}")
        }
        TraceEvent::BatchClosed { replica, size } => format!("batch r{replica} size={size}"),
        TraceEvent::StateScan { owner, blobs } => {
            let total: usize = blobs.iter().map(|b| b.len()).sum();
            format!("state-scan {owner} blobs={} bytes={total}", blobs.len())
        }
        TraceEvent::Note { text } => format!("note {text}"),
    }
}

/// Extract trace metadata from a protocol message, for `Emit` records.
pub fn meta_of(msg: &crate::messages::Message) -> MsgMeta {
    use crate::messages::Message::*;
    match msg {
        Request(m) => MsgMeta {
            kind: "Request",
            v: 0,
            n: 0,
            d: None,
            client: Some(m.c),
            t: Some(m.t),
        },
        PrePrepare(m) => MsgMeta {
            kind: "PrePrepare",
            v: m.v,
            n: m.n,
            d: Some(m.digest()),
            client: None,
            t: None,
        },
        Prepare(m) => MsgMeta {
            kind: "Prepare",
            v: m.v,
            n: m.n,
            d: Some(m.d),
            client: None,
            t: None,
        },
        Commit(m) => MsgMeta {
            kind: "Commit",
            v: m.v,
            n: m.n,
            d: Some(m.d),
            client: None,
            t: None,
        },
        Checkpoint(m) => MsgMeta {
            kind: "Checkpoint",
            v: m.v,
            n: m.n,
            d: Some(m.d),
            client: None,
            t: None,
        },
        ViewChange(m) => MsgMeta {
            kind: "ViewChange",
            v: m.new_view,
            n: m.ckpt.n,
            d: None,
            client: None,
            t: None,
        },
        NewView(m) => MsgMeta {
            kind: "NewView",
            v: m.v,
            n: m.ckpt.n,
            d: None,
            client: None,
            t: None,
        },
        Reply(m) => MsgMeta {
            kind: "Reply",
            v: m.v,
            n: 0,
            d: None,
            client: Some(m.c),
            t: Some(m.t),
        },
    }
}
