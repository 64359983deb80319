//! Wire message types and their canonical encoding.
//!
//! Every message encodes as `version | tag | fields in declaration order |
//! authenticator last`. Encoding is canonical: the same message always
//! produces the same bytes, so digests and signatures are stable. Decoding
//! treats input as untrusted and never panics.

use crate::config::{ClientId, CompartmentKind, ReplicaId, SeqNo, View, NOOP_CLIENT};
use crate::digest::Digest;
use crate::wire::{Reader, WireError, Writer};

pub const WIRE_VERSION: u8 = 0x01;

pub const TAG_REQUEST: u8 = 0x01;
pub const TAG_PREPREPARE: u8 = 0x02;
pub const TAG_PREPARE: u8 = 0x03;
pub const TAG_COMMIT: u8 = 0x04;
pub const TAG_CHECKPOINT: u8 = 0x05;
pub const TAG_VIEWCHANGE: u8 = 0x06;
pub const TAG_NEWVIEW: u8 = 0x07;
pub const TAG_REPLY: u8 = 0x08;

/// Domain tag for client MACs on requests.
pub const DOMAIN_CLIENT_REQUEST: u8 = 0x40;
/// Domain tag for session MACs on replies.
pub const DOMAIN_REPLY: u8 = 0x50;
/// Domain tag for checkpoint snapshot digests.
pub const DOMAIN_SNAPSHOT: u8 = 0x60;

/// One MAC tag per intended recipient replica.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacEntry {
    pub replica: ReplicaId,
    pub tag: Vec<u8>,
}

/// A client request. The operation is AEAD-sealed under the client session
/// key; only Execution enclaves ever see the plaintext.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub op_ciphertext: Vec<u8>,
    /// Client timestamp; strictly increasing per correct client.
    pub t: u64,
    pub c: ClientId,
    /// Per-replica MAC vector.
    pub auth: Vec<MacEntry>,
}

impl Request {
    /// No-op request used to fill sequence gaps after a view change.
    pub fn noop() -> Self {
        Request {
            op_ciphertext: Vec::new(),
            t: 0,
            c: NOOP_CLIENT,
            auth: Vec::new(),
        }
    }

    pub fn is_noop(&self) -> bool {
        self.c == NOOP_CLIENT
    }

    fn encode_body(&self, w: &mut Writer) {
        w.u8(WIRE_VERSION);
        w.u8(TAG_REQUEST);
        w.bytes(&self.op_ciphertext);
        w.u64(self.t);
        w.u64(self.c);
    }

    pub fn encode_into(&self, w: &mut Writer) {
        self.encode_body(w);
        w.list(&self.auth, |w, m| {
            w.u32(m.replica);
            w.bytes(&m.tag);
        });
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.finish()
    }

    /// Bytes covered by the client MAC (domain-tagged body, auth excluded).
    pub fn mac_input(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(DOMAIN_CLIENT_REQUEST);
        self.encode_body(&mut w);
        w.finish()
    }

    pub fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        expect_header(r, TAG_REQUEST)?;
        Self::decode_after_header(r)
    }

    fn decode_after_header(r: &mut Reader) -> Result<Self, WireError> {
        let op_ciphertext = r.bytes()?;
        let t = r.u64()?;
        let c = r.u64()?;
        let auth = r.list(|r| {
            Ok(MacEntry {
                replica: r.u32()?,
                tag: r.bytes()?,
            })
        })?;
        Ok(Request {
            op_ciphertext,
            t,
            c,
            auth,
        })
    }

    pub fn mac_for(&self, replica: ReplicaId) -> Option<&[u8]> {
        self.auth
            .iter()
            .find(|m| m.replica == replica)
            .map(|m| m.tag.as_slice())
    }
}

/// Digest of a request batch: the value carried by Prepare and Commit.
pub fn batch_digest(batch: &[Request]) -> Digest {
    let mut w = Writer::new();
    w.list(batch, |w, req| w.bytes(&req.encode()));
    Digest::of(w.as_slice())
}

/// Ordering proposal from the primary's Preparation enclave.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrePrepare {
    pub v: View,
    pub n: SeqNo,
    pub batch: Vec<Request>,
    /// Signature by the view primary's Preparation enclave.
    pub sig: Vec<u8>,
}

impl PrePrepare {
    pub fn digest(&self) -> Digest {
        batch_digest(&self.batch)
    }

    fn encode_body(&self, w: &mut Writer) {
        w.u8(WIRE_VERSION);
        w.u8(TAG_PREPREPARE);
        w.u64(self.v);
        w.u64(self.n);
        w.list(&self.batch, |w, req| w.bytes(&req.encode()));
    }

    pub fn encode_into(&self, w: &mut Writer) {
        self.encode_body(w);
        w.bytes(&self.sig);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.finish()
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(CompartmentKind::Preparation.domain_tag());
        self.encode_body(&mut w);
        w.finish()
    }

    pub fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        expect_header(r, TAG_PREPREPARE)?;
        Self::decode_after_header(r)
    }

    fn decode_after_header(r: &mut Reader) -> Result<Self, WireError> {
        let v = r.u64()?;
        let n = r.u64()?;
        let batch = r.list(|r| {
            let raw = r.bytes()?;
            let mut inner = Reader::new(&raw);
            let req = Request::decode_from(&mut inner)?;
            inner.expect_end()?;
            Ok(req)
        })?;
        let sig = r.bytes()?;
        Ok(PrePrepare { v, n, batch, sig })
    }
}

/// Vote on a proposal, emitted by a non-primary Preparation enclave.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prepare {
    pub v: View,
    pub n: SeqNo,
    pub d: Digest,
    pub i: ReplicaId,
    pub sig: Vec<u8>,
}

/// Confirmation that a prepare certificate was observed; signed by a
/// Confirmation enclave.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Commit {
    pub v: View,
    pub n: SeqNo,
    pub d: Digest,
    pub i: ReplicaId,
    pub sig: Vec<u8>,
}

/// Snapshot announcement from an Execution enclave; `n` is a multiple of the
/// checkpoint interval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub v: View,
    pub n: SeqNo,
    pub d: Digest,
    pub i: ReplicaId,
    pub sig: Vec<u8>,
}

macro_rules! vote_message {
    ($ty:ident, $tag:expr, $kind:expr) => {
        impl $ty {
            fn encode_body(&self, w: &mut Writer) {
                w.u8(WIRE_VERSION);
                w.u8($tag);
                w.u64(self.v);
                w.u64(self.n);
                w.digest(&self.d);
                w.u32(self.i);
            }

            pub fn encode_into(&self, w: &mut Writer) {
                self.encode_body(w);
                w.bytes(&self.sig);
            }

            pub fn encode(&self) -> Vec<u8> {
                let mut w = Writer::new();
                self.encode_into(&mut w);
                w.finish()
            }

            pub fn signed_bytes(&self) -> Vec<u8> {
                let mut w = Writer::new();
                w.u8($kind.domain_tag());
                self.encode_body(&mut w);
                w.finish()
            }

            pub fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
                expect_header(r, $tag)?;
                Self::decode_after_header(r)
            }

            fn decode_after_header(r: &mut Reader) -> Result<Self, WireError> {
                let v = r.u64()?;
                let n = r.u64()?;
                let d = r.digest()?;
                let i = r.u32()?;
                let sig = r.bytes()?;
                Ok($ty { v, n, d, i, sig })
            }
        }
    };
}

vote_message!(Prepare, TAG_PREPARE, CompartmentKind::Preparation);
vote_message!(Commit, TAG_COMMIT, CompartmentKind::Confirmation);
vote_message!(Checkpoint, TAG_CHECKPOINT, CompartmentKind::Execution);

/// A prepare certificate: one PrePrepare plus `2f` matching Prepares from
/// `2f + 1` distinct replicas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepareCertificate {
    pub preprepare: PrePrepare,
    pub prepares: Vec<Prepare>,
}

impl PrepareCertificate {
    pub fn v(&self) -> View {
        self.preprepare.v
    }

    pub fn n(&self) -> SeqNo {
        self.preprepare.n
    }

    pub fn digest(&self) -> Digest {
        self.preprepare.digest()
    }

    pub fn encode_into(&self, w: &mut Writer) {
        w.bytes(&self.preprepare.encode());
        w.list(&self.prepares, |w, p| w.bytes(&p.encode()));
    }

    pub fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        let raw = r.bytes()?;
        let mut inner = Reader::new(&raw);
        let preprepare = PrePrepare::decode_from(&mut inner)?;
        inner.expect_end()?;
        let prepares = r.list(|r| {
            let raw = r.bytes()?;
            let mut inner = Reader::new(&raw);
            let p = Prepare::decode_from(&mut inner)?;
            inner.expect_end()?;
            Ok(p)
        })?;
        Ok(PrepareCertificate {
            preprepare,
            prepares,
        })
    }
}

/// A checkpoint certificate: `2f + 1` matching Checkpoints. The genesis
/// certificate (`n = 0`) has no members.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointCertificate {
    pub n: SeqNo,
    pub d: Digest,
    pub checkpoints: Vec<Checkpoint>,
}

impl CheckpointCertificate {
    pub fn genesis(d: Digest) -> Self {
        CheckpointCertificate {
            n: 0,
            d,
            checkpoints: Vec::new(),
        }
    }

    pub fn is_genesis(&self) -> bool {
        self.n == 0
    }

    pub fn encode_into(&self, w: &mut Writer) {
        w.u64(self.n);
        w.digest(&self.d);
        w.list(&self.checkpoints, |w, c| w.bytes(&c.encode()));
    }

    pub fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        let n = r.u64()?;
        let d = r.digest()?;
        let checkpoints = r.list(|r| {
            let raw = r.bytes()?;
            let mut inner = Reader::new(&raw);
            let c = Checkpoint::decode_from(&mut inner)?;
            inner.expect_end()?;
            Ok(c)
        })?;
        Ok(CheckpointCertificate { n, d, checkpoints })
    }
}

/// View-change vote from a Confirmation enclave: its stable checkpoint plus
/// every prepare certificate above it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewChange {
    /// The view being moved to.
    pub new_view: View,
    pub ckpt: CheckpointCertificate,
    pub prepare_certs: Vec<PrepareCertificate>,
    pub i: ReplicaId,
    pub sig: Vec<u8>,
}

impl ViewChange {
    fn encode_body(&self, w: &mut Writer) {
        w.u8(WIRE_VERSION);
        w.u8(TAG_VIEWCHANGE);
        w.u64(self.new_view);
        self.ckpt.encode_into(w);
        w.list(&self.prepare_certs, |w, pc| pc.encode_into(w));
        w.u32(self.i);
    }

    pub fn encode_into(&self, w: &mut Writer) {
        self.encode_body(w);
        w.bytes(&self.sig);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.finish()
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(CompartmentKind::Confirmation.domain_tag());
        self.encode_body(&mut w);
        w.finish()
    }

    pub fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        expect_header(r, TAG_VIEWCHANGE)?;
        Self::decode_after_header(r)
    }

    fn decode_after_header(r: &mut Reader) -> Result<Self, WireError> {
        let new_view = r.u64()?;
        let ckpt = CheckpointCertificate::decode_from(r)?;
        let prepare_certs = r.list(PrepareCertificate::decode_from)?;
        let i = r.u32()?;
        let sig = r.bytes()?;
        Ok(ViewChange {
            new_view,
            ckpt,
            prepare_certs,
            i,
            sig,
        })
    }
}

/// New-view installation from the incoming primary's Preparation enclave.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewView {
    pub v: View,
    /// `2f + 1` valid ViewChanges for `v`.
    pub proof: Vec<ViewChange>,
    /// Re-issued PrePrepares covering every sequence proven prepared in the
    /// proof, gaps filled with no-ops.
    pub preprepares: Vec<PrePrepare>,
    pub ckpt: CheckpointCertificate,
    pub sig: Vec<u8>,
}

impl NewView {
    fn encode_body(&self, w: &mut Writer) {
        w.u8(WIRE_VERSION);
        w.u8(TAG_NEWVIEW);
        w.u64(self.v);
        w.list(&self.proof, |w, vc| w.bytes(&vc.encode()));
        w.list(&self.preprepares, |w, pp| w.bytes(&pp.encode()));
        self.ckpt.encode_into(w);
    }

    pub fn encode_into(&self, w: &mut Writer) {
        self.encode_body(w);
        w.bytes(&self.sig);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.finish()
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(CompartmentKind::Preparation.domain_tag());
        self.encode_body(&mut w);
        w.finish()
    }

    pub fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        expect_header(r, TAG_NEWVIEW)?;
        Self::decode_after_header(r)
    }

    fn decode_after_header(r: &mut Reader) -> Result<Self, WireError> {
        let v = r.u64()?;
        let proof = r.list(|r| {
            let raw = r.bytes()?;
            let mut inner = Reader::new(&raw);
            let vc = ViewChange::decode_from(&mut inner)?;
            inner.expect_end()?;
            Ok(vc)
        })?;
        let preprepares = r.list(|r| {
            let raw = r.bytes()?;
            let mut inner = Reader::new(&raw);
            let pp = PrePrepare::decode_from(&mut inner)?;
            inner.expect_end()?;
            Ok(pp)
        })?;
        let ckpt = CheckpointCertificate::decode_from(r)?;
        let sig = r.bytes()?;
        Ok(NewView {
            v,
            proof,
            preprepares,
            ckpt,
            sig,
        })
    }
}

/// Result returned to a client; sealed under the client session key and
/// MAC'd under the per-replica session. Produced only by Execution enclaves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub v: View,
    pub t: u64,
    pub c: ClientId,
    pub i: ReplicaId,
    pub result_ciphertext: Vec<u8>,
    pub auth: Vec<u8>,
}

impl Reply {
    fn encode_body(&self, w: &mut Writer) {
        w.u8(WIRE_VERSION);
        w.u8(TAG_REPLY);
        w.u64(self.v);
        w.u64(self.t);
        w.u64(self.c);
        w.u32(self.i);
        w.bytes(&self.result_ciphertext);
    }

    pub fn encode_into(&self, w: &mut Writer) {
        self.encode_body(w);
        w.bytes(&self.auth);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.finish()
    }

    pub fn mac_input(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(DOMAIN_REPLY);
        self.encode_body(&mut w);
        w.finish()
    }

    pub fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        expect_header(r, TAG_REPLY)?;
        Self::decode_after_header(r)
    }

    fn decode_after_header(r: &mut Reader) -> Result<Self, WireError> {
        let v = r.u64()?;
        let t = r.u64()?;
        let c = r.u64()?;
        let i = r.u32()?;
        let result_ciphertext = r.bytes()?;
        let auth = r.bytes()?;
        Ok(Reply {
            v,
            t,
            c,
            i,
            result_ciphertext,
            auth,
        })
    }
}

/// Any protocol message, as routed by brokers and carried by transports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Request(Request),
    PrePrepare(PrePrepare),
    Prepare(Prepare),
    Commit(Commit),
    Checkpoint(Checkpoint),
    ViewChange(ViewChange),
    NewView(NewView),
    Reply(Reply),
}

impl Message {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Message::Request(m) => m.encode(),
            Message::PrePrepare(m) => m.encode(),
            Message::Prepare(m) => m.encode(),
            Message::Commit(m) => m.encode(),
            Message::Checkpoint(m) => m.encode(),
            Message::ViewChange(m) => m.encode(),
            Message::NewView(m) => m.encode(),
            Message::Reply(m) => m.encode(),
        }
    }

    /// Decode a whole message, rejecting trailing bytes. Untrusted input:
    /// any malformed prefix yields an error, never a panic.
    pub fn decode(input: &[u8]) -> Result<Message, WireError> {
        let mut r = Reader::new(input);
        let version = r.u8()?;
        if version != WIRE_VERSION {
            return Err(WireError::BadVersion(version));
        }
        let tag = r.u8()?;
        let msg = match tag {
            TAG_REQUEST => Message::Request(Request::decode_after_header(&mut r)?),
            TAG_PREPREPARE => Message::PrePrepare(PrePrepare::decode_after_header(&mut r)?),
            TAG_PREPARE => Message::Prepare(Prepare::decode_after_header(&mut r)?),
            TAG_COMMIT => Message::Commit(Commit::decode_after_header(&mut r)?),
            TAG_CHECKPOINT => Message::Checkpoint(Checkpoint::decode_after_header(&mut r)?),
            TAG_VIEWCHANGE => Message::ViewChange(ViewChange::decode_after_header(&mut r)?),
            TAG_NEWVIEW => Message::NewView(NewView::decode_after_header(&mut r)?),
            TAG_REPLY => Message::Reply(Reply::decode_after_header(&mut r)?),
            other => return Err(WireError::UnknownTag(other)),
        };
        r.expect_end()?;
        Ok(msg)
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Message::Request(_) => "Request",
            Message::PrePrepare(_) => "PrePrepare",
            Message::Prepare(_) => "Prepare",
            Message::Commit(_) => "Commit",
            Message::Checkpoint(_) => "Checkpoint",
            Message::ViewChange(_) => "ViewChange",
            Message::NewView(_) => "NewView",
            Message::Reply(_) => "Reply",
        }
    }

    /// Compartment type whose key must have produced the signature, where
    /// the message is enclave-signed.
    pub fn signer_kind(&self) -> Option<CompartmentKind> {
        match self {
            Message::PrePrepare(_) | Message::Prepare(_) | Message::NewView(_) => {
                Some(CompartmentKind::Preparation)
            }
            Message::Commit(_) | Message::ViewChange(_) => Some(CompartmentKind::Confirmation),
            Message::Checkpoint(_) => Some(CompartmentKind::Execution),
            Message::Request(_) | Message::Reply(_) => None,
        }
    }

    /// Short one-line summary used in traces.
    pub fn summary(&self) -> String {
        match self {
            Message::Request(m) => format!("Request c={} t={}", m.c, m.t),
            Message::PrePrepare(m) => format!(
                "PrePrepare v={} n={} d={} |batch|={}",
                m.v,
                m.n,
                m.digest(),
                m.batch.len()
            ),
            Message::Prepare(m) => format!("Prepare v={} n={} d={} i={}", m.v, m.n, m.d, m.i),
            Message::Commit(m) => format!("Commit v={} n={} d={} i={}", m.v, m.n, m.d, m.i),
            Message::Checkpoint(m) => {
                format!("Checkpoint v={} n={} d={} i={}", m.v, m.n, m.d, m.i)
            }
            Message::ViewChange(m) => format!(
                "ViewChange v={} ckpt_n={} certs={} i={}",
                m.new_view,
                m.ckpt.n,
                m.prepare_certs.len(),
                m.i
            ),
            Message::NewView(m) => format!(
                "NewView v={} proof={} pps={} ckpt_n={}",
                m.v,
                m.proof.len(),
                m.preprepares.len(),
                m.ckpt.n
            ),
            Message::Reply(m) => format!("Reply v={} t={} c={} i={}", m.v, m.t, m.c, m.i),
        }
    }
}

fn expect_header(r: &mut Reader, tag: u8) -> Result<(), WireError> {
    let version = r.u8()?;
    if version != WIRE_VERSION {
        return Err(WireError::BadVersion(version));
    }
    let got = r.u8()?;
    if got != tag {
        return Err(WireError::UnknownTag(got));
    }
    Ok(())
}
