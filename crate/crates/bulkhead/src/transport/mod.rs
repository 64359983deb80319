//! Transports: addressing, network frames, a deterministic in-process
//! simulated network (the default test substrate) and a real TCP transport.
//!
//! A frame is either an encoded protocol message or one of a handful of
//! environment-level exchanges (attestation handshakes, snapshot transfer)
//! that never carry key material or plaintext. Frame layout is documented in
//! `docs/wire-format.md`.

pub mod sim;
pub mod tcp;

use crate::config::{ClientId, CompartmentKind, EnclaveId, ReplicaId, SeqNo};
use crate::crypto::AttestOffer;
use crate::wire::{Reader, WireError, Writer};

/// A network endpoint: a replica's broker or a client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Addr {
    Replica(ReplicaId),
    Client(ClientId),
}

impl std::fmt::Display for Addr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Addr::Replica(r) => write!(f, "r{r}"),
            Addr::Client(c) => write!(f, "c{c}"),
        }
    }
}

const FRAME_PROTOCOL: u8 = 0x01;
const FRAME_ATTEST: u8 = 0x02;
const FRAME_ATTEST_RESULT: u8 = 0x03;
const FRAME_SNAPSHOT_REQ: u8 = 0x04;
const FRAME_SNAPSHOT_RESP: u8 = 0x05;
const FRAME_HELLO: u8 = 0x06;

/// What travels between endpoints.
#[derive(Debug, Clone)]
pub enum Frame {
    /// An encoded [`crate::messages::Message`].
    Protocol(Vec<u8>),
    /// Stub attestation offer for one enclave.
    Attest(AttestOffer),
    AttestResult {
        client: ClientId,
        target: EnclaveId,
        ok: bool,
    },
    /// Environment-level state transfer: ask a peer for a sealed snapshot.
    SnapshotRequest { n: SeqNo },
    SnapshotResponse { n: SeqNo, sealed: Vec<u8> },
    /// Connection opener on stream transports: names the sender.
    Hello { from: Addr },
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Frame::Protocol(bytes) => {
                w.u8(FRAME_PROTOCOL);
                w.bytes(bytes);
            }
            Frame::Attest(offer) => {
                w.u8(FRAME_ATTEST);
                w.u64(offer.client);
                w.u32(offer.target.replica);
                w.u8(offer.target.kind.domain_tag());
                w.bytes(&offer.eph_pub);
                w.bytes(&offer.wrapped);
                w.bytes(&offer.client_sig);
            }
            Frame::AttestResult { client, target, ok } => {
                w.u8(FRAME_ATTEST_RESULT);
                w.u64(*client);
                w.u32(target.replica);
                w.u8(target.kind.domain_tag());
                w.u8(u8::from(*ok));
            }
            Frame::SnapshotRequest { n } => {
                w.u8(FRAME_SNAPSHOT_REQ);
                w.u64(*n);
            }
            Frame::SnapshotResponse { n, sealed } => {
                w.u8(FRAME_SNAPSHOT_RESP);
                w.u64(*n);
                w.bytes(sealed);
            }
            Frame::Hello { from } => {
                w.u8(FRAME_HELLO);
                match from {
                    Addr::Replica(r) => {
                        w.u8(0);
                        w.u64(*r as u64);
                    }
                    Addr::Client(c) => {
                        w.u8(1);
                        w.u64(*c);
                    }
                }
            }
        }
        w.finish()
    }

    pub fn decode(input: &[u8]) -> Result<Frame, WireError> {
        let mut r = Reader::new(input);
        let frame = match r.u8()? {
            FRAME_PROTOCOL => Frame::Protocol(r.bytes()?),
            FRAME_ATTEST => {
                let client = r.u64()?;
                let replica = r.u32()?;
                let kind = kind_from_tag(r.u8()?)?;
                let eph_pub: [u8; 32] = r
                    .bytes()?
                    .try_into()
                    .map_err(|_| WireError::Malformed("eph_pub"))?;
                let wrapped = r.bytes()?;
                let client_sig = r.bytes()?;
                Frame::Attest(AttestOffer {
                    client,
                    target: EnclaveId::new(replica, kind),
                    eph_pub,
                    wrapped,
                    client_sig,
                })
            }
            FRAME_ATTEST_RESULT => {
                let client = r.u64()?;
                let replica = r.u32()?;
                let kind = kind_from_tag(r.u8()?)?;
                let ok = r.u8()? != 0;
                Frame::AttestResult {
                    client,
                    target: EnclaveId::new(replica, kind),
                    ok,
                }
            }
            FRAME_SNAPSHOT_REQ => Frame::SnapshotRequest { n: r.u64()? },
            FRAME_SNAPSHOT_RESP => Frame::SnapshotResponse {
                n: r.u64()?,
                sealed: r.bytes()?,
            },
            FRAME_HELLO => {
                let kind = r.u8()?;
                let id = r.u64()?;
                let from = match kind {
                    0 => Addr::Replica(id as ReplicaId),
                    1 => Addr::Client(id),
                    _ => return Err(WireError::Malformed("hello addr")),
                };
                Frame::Hello { from }
            }
            other => return Err(WireError::UnknownTag(other)),
        };
        r.expect_end()?;
        Ok(frame)
    }

    pub fn summary(&self) -> String {
        match self {
            Frame::Protocol(bytes) => match crate::messages::Message::decode(bytes) {
                Ok(m) => m.summary(),
                Err(_) => format!("protocol({}B, malformed)", bytes.len()),
            },
            Frame::Attest(o) => format!("attest c={} -> {}", o.client, o.target),
            Frame::AttestResult { client, target, ok } => {
                format!("attest-result c={client} {target} ok={ok}")
            }
            Frame::SnapshotRequest { n } => format!("snapshot-req n={n}"),
            Frame::SnapshotResponse { n, sealed } => {
                format!("snapshot-resp n={n} ({}B)", sealed.len())
            }
            Frame::Hello { from } => format!("hello {from}"),
        }
    }
}

fn kind_from_tag(tag: u8) -> Result<CompartmentKind, WireError> {
    match tag {
        0x10 => Ok(CompartmentKind::Preparation),
        0x20 => Ok(CompartmentKind::Confirmation),
        0x30 => Ok(CompartmentKind::Execution),
        _ => Err(WireError::Malformed("compartment tag")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trips() {
        let frames = vec![
            Frame::Protocol(vec![1, 2, 3]),
            Frame::AttestResult {
                client: 7,
                target: EnclaveId::new(2, CompartmentKind::Execution),
                ok: true,
            },
            Frame::SnapshotRequest { n: 100 },
            Frame::SnapshotResponse {
                n: 100,
                sealed: vec![9; 40],
            },
        ];
        for f in frames {
            let enc = f.encode();
            let back = Frame::decode(&enc).unwrap();
            assert_eq!(enc, back.encode());
        }
    }

    #[test]
    fn garbage_frame_rejected() {
        assert!(Frame::decode(&[0xEE, 1, 2]).is_err());
        assert!(Frame::decode(&[]).is_err());
    }
}
