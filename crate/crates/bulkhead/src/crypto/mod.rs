//! Key material, enclave signatures and the cluster key registry.
//!
//! This is the only module that touches private keys. Enclave key pairs are
//! moved into their owning compartment at construction and expose no export
//! operation. All key generation is derived from a bootstrap seed so that
//! scenario replays are byte-reproducible; signatures, MACs and AEAD seals
//! are deterministic functions of (key, input, counter).

mod attest;
mod session;

pub use attest::{
    attest_offer, enclave_accept_offer, AttestError, AttestOffer, AttestPolicy, SessionMaterial,
};
pub use session::{
    open_blob, open_request, open_result, reply_mac, seal_blob, seal_reply, seal_request,
    verify_reply_mac, ClientSealer, ExecSession, SealError, MAC_LEN,
};

use std::collections::BTreeMap;

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use hmac::{Hmac, Mac};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::config::{ClientId, CompartmentKind, EnclaveId, ReplicaId};

pub const SIG_LEN: usize = 64;

/// Domain tag for client signatures over attestation offers.
pub const DOMAIN_ATTEST: u8 = 0x70;

type HmacSha256 = Hmac<Sha256>;

/// Derive a 32-byte subkey from a seed and a context label.
pub fn derive_key(seed: &[u8], context: &[&[u8]]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(seed).expect("hmac accepts any key length");
    for part in context {
        mac.update(&(part.len() as u64).to_be_bytes());
        mac.update(part);
    }
    mac.finalize().into_bytes().into()
}

/// Signing identity of one enclave. The private halves never leave this
/// struct; there is deliberately no accessor for them.
pub struct EnclaveKeyPair {
    id: EnclaveId,
    signing: SigningKey,
    attest_secret: x25519_dalek::StaticSecret,
}

impl EnclaveKeyPair {
    pub fn from_seed(id: EnclaveId, cluster_seed: &[u8]) -> Self {
        let sk = derive_key(
            cluster_seed,
            &[
                b"enclave-sign",
                &id.replica.to_be_bytes(),
                &[id.kind.domain_tag()],
            ],
        );
        let xk = derive_key(
            cluster_seed,
            &[
                b"enclave-x25519",
                &id.replica.to_be_bytes(),
                &[id.kind.domain_tag()],
            ],
        );
        EnclaveKeyPair {
            id,
            signing: SigningKey::from_bytes(&sk),
            attest_secret: x25519_dalek::StaticSecret::from(xk),
        }
    }

    pub fn id(&self) -> EnclaveId {
        self.id
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn attest_public(&self) -> x25519_dalek::PublicKey {
        x25519_dalek::PublicKey::from(&self.attest_secret)
    }

    /// Sign already-domain-tagged bytes (see `signed_bytes` on messages).
    pub fn sign(&self, msg: &[u8]) -> Vec<u8> {
        self.signing.sign(msg).to_bytes().to_vec()
    }

    pub(crate) fn attest_shared(&self, peer_eph: &x25519_dalek::PublicKey) -> [u8; 32] {
        *self.attest_secret.diffie_hellman(peer_eph).as_bytes()
    }
}

impl std::fmt::Debug for EnclaveKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EnclaveKeyPair({})", self.id)
    }
}

/// Client signing identity.
pub struct ClientKeyPair {
    id: ClientId,
    signing: SigningKey,
}

impl ClientKeyPair {
    pub fn from_seed(id: ClientId, cluster_seed: &[u8]) -> Self {
        let sk = derive_key(cluster_seed, &[b"client-sign", &id.to_be_bytes()]);
        ClientKeyPair {
            id,
            signing: SigningKey::from_bytes(&sk),
        }
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn sign(&self, msg: &[u8]) -> Vec<u8> {
        self.signing.sign(msg).to_bytes().to_vec()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerifyError {
    #[error("unknown sender {0}")]
    UnknownSender(String),
    #[error("bad signature")]
    BadSignature,
}

/// Public keys of every enclave and client; immutable after bootstrap and
/// identical on all nodes.
#[derive(Clone, Default)]
pub struct KeyRegistry {
    enclaves: BTreeMap<EnclaveId, (VerifyingKey, x25519_dalek::PublicKey)>,
    clients: BTreeMap<ClientId, VerifyingKey>,
}

impl KeyRegistry {
    pub fn register_enclave(
        &mut self,
        id: EnclaveId,
        verify: VerifyingKey,
        attest: x25519_dalek::PublicKey,
    ) {
        self.enclaves.insert(id, (verify, attest));
    }

    pub fn register_client(&mut self, id: ClientId, verify: VerifyingKey) {
        self.clients.insert(id, verify);
    }

    pub fn attest_public(&self, id: EnclaveId) -> Option<&x25519_dalek::PublicKey> {
        self.enclaves.get(&id).map(|(_, x)| x)
    }

    pub fn enclaves(&self) -> impl Iterator<Item = EnclaveId> + '_ {
        self.enclaves.keys().copied()
    }

    pub fn clients(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.clients.keys().copied()
    }

    /// Verify an enclave signature. The expected compartment kind is part of
    /// the sender identity: a signature made by another kind's key fails
    /// even before considering the domain tag inside the signed bytes.
    pub fn verify(&self, sender: EnclaveId, msg: &[u8], sig: &[u8]) -> Result<(), VerifyError> {
        let (vk, _) = self
            .enclaves
            .get(&sender)
            .ok_or_else(|| VerifyError::UnknownSender(sender.to_string()))?;
        let sig_arr: [u8; SIG_LEN] = sig.try_into().map_err(|_| VerifyError::BadSignature)?;
        vk.verify_strict(msg, &Signature::from_bytes(&sig_arr))
            .map_err(|_| VerifyError::BadSignature)
    }

    pub fn verify_client(
        &self,
        client: ClientId,
        msg: &[u8],
        sig: &[u8],
    ) -> Result<(), VerifyError> {
        let vk = self
            .clients
            .get(&client)
            .ok_or_else(|| VerifyError::UnknownSender(format!("client {client}")))?;
        let sig_arr: [u8; SIG_LEN] = sig.try_into().map_err(|_| VerifyError::BadSignature)?;
        vk.verify_strict(msg, &Signature::from_bytes(&sig_arr))
            .map_err(|_| VerifyError::BadSignature)
    }

    /// Hex-text keystore: one record per enclave/client, documented in
    /// `docs/keystore-format.md`.
    pub fn to_keystore(&self) -> String {
        let mut out = String::new();
        for (id, (vk, xk)) in &self.enclaves {
            out.push_str(&format!(
                "enclave {} {} {} {}\n",
                id.replica,
                id.kind.label(),
                hex::encode(vk.as_bytes()),
                hex::encode(xk.as_bytes()),
            ));
        }
        for (id, vk) in &self.clients {
            out.push_str(&format!("client {} {}\n", id, hex::encode(vk.as_bytes())));
        }
        out
    }

    pub fn from_keystore(text: &str) -> Result<Self, KeystoreError> {
        let mut reg = KeyRegistry::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |why: &'static str| KeystoreError::Malformed {
                line: lineno + 1,
                why,
            };
            match fields.as_slice() {
                ["enclave", replica, kind, vk, xk] => {
                    let replica: ReplicaId = replica.parse().map_err(|_| bad("replica id"))?;
                    let kind =
                        CompartmentKind::from_label(kind).ok_or_else(|| bad("compartment"))?;
                    let vk = parse_key32(vk).ok_or_else(|| bad("verify key"))?;
                    let xk = parse_key32(xk).ok_or_else(|| bad("attest key"))?;
                    let vk =
                        VerifyingKey::from_bytes(&vk).map_err(|_| bad("invalid verify key"))?;
                    reg.register_enclave(
                        EnclaveId::new(replica, kind),
                        vk,
                        x25519_dalek::PublicKey::from(xk),
                    );
                }
                ["client", id, vk] => {
                    let id: ClientId = id.parse().map_err(|_| bad("client id"))?;
                    let vk = parse_key32(vk).ok_or_else(|| bad("verify key"))?;
                    let vk =
                        VerifyingKey::from_bytes(&vk).map_err(|_| bad("invalid verify key"))?;
                    reg.register_client(id, vk);
                }
                _ => return Err(bad("unknown record")),
            }
        }
        Ok(reg)
    }
}

fn parse_key32(s: &str) -> Option<[u8; 32]> {
    let raw = hex::decode(s).ok()?;
    raw.try_into().ok()
}

#[derive(Debug, Error)]
pub enum KeystoreError {
    #[error("keystore line {line}: malformed {why}")]
    Malformed { line: usize, why: &'static str },
}

/// Compute a client MAC tag over domain-tagged bytes.
pub fn mac_tag(key: &[u8; 32], input: &[u8]) -> Vec<u8> {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(input);
    mac.finalize().into_bytes().to_vec()
}

pub fn mac_verify(key: &[u8; 32], input: &[u8], tag: &[u8]) -> bool {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(input);
    mac.verify_slice(tag).is_ok()
}

/// All key material produced at cluster bootstrap. The harness moves each
/// enclave key pair into its compartment; the registry is shared read-only.
pub struct ClusterKeys {
    seed: Vec<u8>,
    pub registry: KeyRegistry,
    /// Sealing key shared by the Execution compartment type, for snapshots
    /// and persisted ledger blocks. Never handed to other compartments or
    /// the environment.
    pub exec_sealing: [u8; 32],
}

impl ClusterKeys {
    pub fn bootstrap(seed: u64, n: ReplicaId, clients: &[ClientId]) -> Self {
        let seed_bytes = Sha256::digest(seed.to_be_bytes()).to_vec();
        let mut registry = KeyRegistry::default();
        for replica in 0..n {
            for kind in CompartmentKind::ALL {
                let id = EnclaveId::new(replica, kind);
                let kp = EnclaveKeyPair::from_seed(id, &seed_bytes);
                registry.register_enclave(id, kp.verifying_key(), kp.attest_public());
            }
        }
        for &c in clients {
            let kp = ClientKeyPair::from_seed(c, &seed_bytes);
            registry.register_client(c, kp.verifying_key());
        }
        let exec_sealing = derive_key(&seed_bytes, &[b"exec-sealing"]);
        ClusterKeys {
            seed: seed_bytes,
            registry,
            exec_sealing,
        }
    }

    /// Re-derive an enclave's key pair for handing into its compartment.
    pub fn enclave_keys(&self, id: EnclaveId) -> EnclaveKeyPair {
        EnclaveKeyPair::from_seed(id, &self.seed)
    }

    pub fn client_keys(&self, id: ClientId) -> ClientKeyPair {
        ClientKeyPair::from_seed(id, &self.seed)
    }

    /// Every secret byte-string known at bootstrap; the harness scans
    /// untrusted queues and frames for these to prove non-exfiltration.
    pub fn secret_material(&self, clients: &[ClientId]) -> Vec<Vec<u8>> {
        let mut secrets = Vec::new();
        for id in self.registry.enclaves() {
            let kp = self.enclave_keys(id);
            secrets.push(kp.signing.to_bytes().to_vec());
        }
        for &c in clients {
            secrets.push(self.client_keys(c).signing.to_bytes().to_vec());
        }
        secrets.push(self.exec_sealing.to_vec());
        secrets
    }
}
