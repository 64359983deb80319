//! Stub attestation handshake.
//!
//! Real remote attestation is out of scope; what it buys — an authenticated,
//! confidential channel to a genuine enclave — is modeled with an x25519
//! exchange against the enclave's registered attestation key. The client
//! wraps session material (per-replica MAC key, plus `s_enc` for Execution
//! targets) under the derived key and signs the offer, so the broker relays
//! only ciphertext it cannot open and the enclave can check authorization.

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use thiserror::Error;

use super::{derive_key, ClientKeyPair, KeyRegistry, DOMAIN_ATTEST};
use crate::config::{ClientId, CompartmentKind, EnclaveId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttestError {
    /// Confirmation enclaves hold no client sessions.
    #[error("clients do not attest to {0} enclaves")]
    WrongKind(CompartmentKind),
    /// The enclave refused the handshake (test hook, or unknown client).
    #[error("attestation rejected")]
    Rejected,
    #[error("offer signature invalid")]
    BadSignature,
    #[error("wrapped session material failed to open")]
    Tampered,
    #[error("target enclave not registered")]
    UnknownEnclave,
}

/// Enclave-side attestation settings.
#[derive(Debug, Clone, Default)]
pub struct AttestPolicy {
    /// Force every handshake to fail; exercises client setup fallback.
    pub force_reject: bool,
}

/// Session material produced by a successful handshake. Both sides hold the
/// same bytes afterwards.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionMaterial {
    pub mac_key: [u8; 32],
    /// Present only for Execution targets.
    pub s_enc: Option<[u8; 32]>,
}

impl std::fmt::Debug for SessionMaterial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // Keys are never printed.
        write!(f, "SessionMaterial(s_enc: {})", self.s_enc.is_some())
    }
}

/// The one message a client sends to an enclave to establish a session.
#[derive(Debug, Clone)]
pub struct AttestOffer {
    pub client: ClientId,
    pub target: EnclaveId,
    pub eph_pub: [u8; 32],
    pub wrapped: Vec<u8>,
    pub client_sig: Vec<u8>,
}

impl AttestOffer {
    fn transcript(&self) -> Vec<u8> {
        let mut t = vec![DOMAIN_ATTEST];
        t.extend_from_slice(&self.client.to_be_bytes());
        t.extend_from_slice(&self.target.replica.to_be_bytes());
        t.push(self.target.kind.domain_tag());
        t.extend_from_slice(&self.eph_pub);
        t.extend_from_slice(&self.wrapped);
        t
    }
}

fn wrap_key(shared: &[u8; 32], client: ClientId, target: EnclaveId) -> [u8; 32] {
    derive_key(
        shared,
        &[
            b"attest-wrap",
            &client.to_be_bytes(),
            &target.replica.to_be_bytes(),
            &[target.kind.domain_tag()],
        ],
    )
}

/// Client side: build an offer carrying the session material for `target`.
///
/// `eph_seed` must be fresh per offer (the client derives it from its seeded
/// rng); `material` is what the enclave should end up holding.
pub fn attest_offer(
    client_keys: &ClientKeyPair,
    target: EnclaveId,
    target_attest_pub: &x25519_dalek::PublicKey,
    eph_seed: [u8; 32],
    material: &SessionMaterial,
) -> Result<AttestOffer, AttestError> {
    if target.kind == CompartmentKind::Confirmation {
        return Err(AttestError::WrongKind(target.kind));
    }
    let eph_secret = x25519_dalek::StaticSecret::from(eph_seed);
    let eph_pub = x25519_dalek::PublicKey::from(&eph_secret);
    let shared = *eph_secret.diffie_hellman(target_attest_pub).as_bytes();
    let k = wrap_key(&shared, client_keys.id(), target);

    let mut payload = material.mac_key.to_vec();
    if target.kind == CompartmentKind::Execution {
        let s_enc = material.s_enc.ok_or(AttestError::Tampered)?;
        payload.extend_from_slice(&s_enc);
    }
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&k));
    let wrapped = cipher
        .encrypt(Nonce::from_slice(&[0u8; 12]), payload.as_slice())
        .expect("encryption is infallible");

    let mut offer = AttestOffer {
        client: client_keys.id(),
        target,
        eph_pub: *eph_pub.as_bytes(),
        wrapped,
        client_sig: Vec::new(),
    };
    offer.client_sig = client_keys.sign(&offer.transcript());
    Ok(offer)
}

/// Enclave side: verify and open an offer, yielding the session material.
pub fn enclave_accept_offer(
    enclave: &super::EnclaveKeyPair,
    registry: &KeyRegistry,
    policy: &AttestPolicy,
    offer: &AttestOffer,
) -> Result<SessionMaterial, AttestError> {
    let kind = enclave.id().kind;
    if kind == CompartmentKind::Confirmation {
        return Err(AttestError::WrongKind(kind));
    }
    if policy.force_reject {
        return Err(AttestError::Rejected);
    }
    if offer.target != enclave.id() {
        return Err(AttestError::Rejected);
    }
    registry
        .verify_client(offer.client, &offer.transcript(), &offer.client_sig)
        .map_err(|_| AttestError::BadSignature)?;

    let eph_pub = x25519_dalek::PublicKey::from(offer.eph_pub);
    let shared = enclave.attest_shared(&eph_pub);
    let k = wrap_key(&shared, offer.client, offer.target);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&k));
    let payload = cipher
        .decrypt(Nonce::from_slice(&[0u8; 12]), offer.wrapped.as_slice())
        .map_err(|_| AttestError::Tampered)?;

    match (kind, payload.len()) {
        (CompartmentKind::Preparation, 32) => Ok(SessionMaterial {
            mac_key: payload.try_into().unwrap(),
            s_enc: None,
        }),
        (CompartmentKind::Execution, 64) => Ok(SessionMaterial {
            mac_key: payload[..32].try_into().unwrap(),
            s_enc: Some(payload[32..].try_into().unwrap()),
        }),
        _ => Err(AttestError::Tampered),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::ClusterKeys;

    fn setup() -> (ClusterKeys, ClientKeyPair) {
        let keys = ClusterKeys::bootstrap(11, 4, &[50]);
        let client = keys.client_keys(50);
        (keys, client)
    }

    fn material() -> SessionMaterial {
        SessionMaterial {
            mac_key: [5u8; 32],
            s_enc: Some([6u8; 32]),
        }
    }

    #[test]
    fn execution_target_gets_session_key() {
        let (keys, client) = setup();
        let target = EnclaveId::new(2, CompartmentKind::Execution);
        let enclave = keys.enclave_keys(target);
        let offer = attest_offer(
            &client,
            target,
            keys.registry.attest_public(target).unwrap(),
            [9u8; 32],
            &material(),
        )
        .unwrap();
        let got =
            enclave_accept_offer(&enclave, &keys.registry, &AttestPolicy::default(), &offer)
                .unwrap();
        assert_eq!(got.mac_key, [5u8; 32]);
        assert_eq!(got.s_enc, Some([6u8; 32]));
    }

    #[test]
    fn preparation_target_gets_mac_only() {
        let (keys, client) = setup();
        let target = EnclaveId::new(0, CompartmentKind::Preparation);
        let enclave = keys.enclave_keys(target);
        let offer = attest_offer(
            &client,
            target,
            keys.registry.attest_public(target).unwrap(),
            [10u8; 32],
            &material(),
        )
        .unwrap();
        let got =
            enclave_accept_offer(&enclave, &keys.registry, &AttestPolicy::default(), &offer)
                .unwrap();
        assert_eq!(got.mac_key, [5u8; 32]);
        assert_eq!(got.s_enc, None);
    }

    #[test]
    fn confirmation_target_is_wrong_kind() {
        let (keys, client) = setup();
        let target = EnclaveId::new(1, CompartmentKind::Confirmation);
        let err = attest_offer(
            &client,
            target,
            keys.registry
                .attest_public(target)
                .unwrap(),
            [11u8; 32],
            &material(),
        )
        .unwrap_err();
        assert_eq!(err, AttestError::WrongKind(CompartmentKind::Confirmation));
    }

    #[test]
    fn forced_reject() {
        let (keys, client) = setup();
        let target = EnclaveId::new(3, CompartmentKind::Execution);
        let enclave = keys.enclave_keys(target);
        let offer = attest_offer(
            &client,
            target,
            keys.registry.attest_public(target).unwrap(),
            [12u8; 32],
            &material(),
        )
        .unwrap();
        let policy = AttestPolicy { force_reject: true };
        assert_eq!(
            enclave_accept_offer(&enclave, &keys.registry, &policy, &offer),
            Err(AttestError::Rejected)
        );
    }

    #[test]
    fn tampered_wrap_rejected() {
        let (keys, client) = setup();
        let target = EnclaveId::new(3, CompartmentKind::Execution);
        let enclave = keys.enclave_keys(target);
        let mut offer = attest_offer(
            &client,
            target,
            keys.registry.attest_public(target).unwrap(),
            [13u8; 32],
            &material(),
        )
        .unwrap();
        offer.wrapped[0] ^= 1;
        // Signature covers the wrap, so mutation trips the signature first.
        assert_eq!(
            enclave_accept_offer(&enclave, &keys.registry, &AttestPolicy::default(), &offer),
            Err(AttestError::BadSignature)
        );
    }

    #[test]
    fn unregistered_client_rejected() {
        let keys = ClusterKeys::bootstrap(11, 4, &[50]);
        let stranger = keys.client_keys(99); // derivable but not registered
        let target = EnclaveId::new(0, CompartmentKind::Execution);
        let enclave = keys.enclave_keys(target);
        let offer = attest_offer(
            &stranger,
            target,
            keys.registry.attest_public(target).unwrap(),
            [14u8; 32],
            &material(),
        )
        .unwrap();
        assert_eq!(
            enclave_accept_offer(&enclave, &keys.registry, &AttestPolicy::default(), &offer),
            Err(AttestError::BadSignature)
        );
    }
}
