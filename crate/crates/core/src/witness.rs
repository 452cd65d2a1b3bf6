//! Simulated authorization layer. Signatures are records binding a signer to
//! the canonical digest of one exact transaction; secrets are committed as
//! SHA-256 hashes of `label || nonce`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::contract::{Beneficiary, OutputSpec, ParticipantId};

macro_rules! hash_newtype {
    ($name:ident) => {
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        pub struct $name(pub [u8; 32]);

        impl $name {
            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn short(&self) -> String {
                hex::encode(&self.0[..4])
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.short())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
                let arr: [u8; 32] = bytes
                    .try_into()
                    .map_err(|_| serde::de::Error::custom("expected 32 bytes"))?;
                Ok($name(arr))
            }
        }
    };
}

hash_newtype!(TxDigest);
hash_newtype!(SecretHash);

/// Length-prefixed, field-ordered byte encoding with fixed-width big-endian
/// integers.
#[derive(Debug, Default)]
pub struct Canonical {
    buf: Vec<u8>,
}

impl Canonical {
    pub fn new(tag: &str) -> Self {
        let mut c = Canonical::default();
        c.put_bytes(tag.as_bytes());
        c
    }

    pub fn put_u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn put_u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn put_u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn put_bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.put_u32(bytes.len() as u32);
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn put_str(&mut self, s: &str) -> &mut Self {
        self.put_bytes(s.as_bytes())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn sha256(&self) -> [u8; 32] {
        Sha256::digest(&self.buf).into()
    }
}

/// Reference to output `vout` of the transaction with digest `txid`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OutPoint {
    pub txid: TxDigest,
    pub vout: u32,
}

/// Digest over the canonical serialization of a transaction template.
pub fn tx_digest(
    salt: &[u8; 32],
    name: &str,
    inputs: &[OutPoint],
    rel_timelock: u64,
    outputs: &[OutputSpec],
) -> TxDigest {
    let mut c = Canonical::new("graftsim/tx/v1");
    c.put_bytes(salt).put_str(name).put_u32(inputs.len() as u32);
    for i in inputs {
        c.put_bytes(&i.txid.0).put_u32(i.vout);
    }
    c.put_u64(rel_timelock).put_u32(outputs.len() as u32);
    for o in outputs {
        c.put_u64(o.value);
        match &o.beneficiary {
            Beneficiary::Participant(p) => c.put_u8(0).put_str(p.as_str()),
            Beneficiary::Continuation => c.put_u8(1),
        };
    }
    TxDigest(c.sha256())
}

/// Digest that edge authorizations (`AuthBy`) sign. Kept apart from the
/// transaction digest so that implicit signatures never count as one.
pub fn auth_digest(d: TxDigest) -> TxDigest {
    let mut c = Canonical::new("graftsim/auth/v1");
    c.put_bytes(&d.0);
    TxDigest(c.sha256())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub signer: ParticipantId,
    pub digest: TxDigest,
}

pub fn sign(signer: &ParticipantId, digest: TxDigest) -> Signature {
    Signature { signer: signer.clone(), digest }
}

pub fn verify(sig: &Signature, digest: TxDigest) -> bool {
    sig.digest == digest
}

/// Signatures held by one participant, keyed by transaction digest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureStore {
    by_digest: BTreeMap<TxDigest, BTreeSet<ParticipantId>>,
}

impl SignatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `sig`. Adding an already-held signature is a no-op.
    pub fn record(&mut self, sig: &Signature) {
        self.by_digest.entry(sig.digest).or_default().insert(sig.signer.clone());
    }

    pub fn contains(&self, signer: &ParticipantId, digest: TxDigest) -> bool {
        self.by_digest.get(&digest).is_some_and(|s| s.contains(signer))
    }

    pub fn signers(&self, digest: TxDigest) -> impl Iterator<Item = &ParticipantId> {
        self.by_digest.get(&digest).into_iter().flatten()
    }

    pub fn holds_all<'a>(&self, digest: TxDigest, signers: impl IntoIterator<Item = &'a ParticipantId>) -> bool {
        let held = self.by_digest.get(&digest);
        signers.into_iter().all(|p| held.is_some_and(|s| s.contains(p)))
    }

    /// Signatures on `digest` as concrete records.
    pub fn signatures_for(&self, digest: TxDigest) -> Vec<Signature> {
        self.signers(digest).map(|p| sign(p, digest)).collect()
    }

    pub fn len(&self) -> usize {
        self.by_digest.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True iff every signature held by `other` is also held here.
    pub fn contains_store(&self, other: &SignatureStore) -> bool {
        other
            .by_digest
            .iter()
            .all(|(d, ps)| ps.iter().all(|p| self.contains(p, *d)))
    }
}

pub fn record_signature(mut store: SignatureStore, sig: &Signature) -> SignatureStore {
    store.record(sig);
    store
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecretOwner {
    Participant(ParticipantId),
    /// The oracle, which is not a contract participant.
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SecretCommitment {
    pub label: String,
    pub hash: SecretHash,
    pub owner: SecretOwner,
}

pub const NONCE_LEN: usize = 16;

pub fn secret_preimage(label: &str, nonce: &[u8; NONCE_LEN]) -> Vec<u8> {
    let mut pre = label.as_bytes().to_vec();
    pre.extend_from_slice(nonce);
    pre
}

impl SecretCommitment {
    pub fn commit(label: &str, owner: SecretOwner, nonce: &[u8; NONCE_LEN]) -> Self {
        SecretCommitment {
            label: label.to_string(),
            hash: SecretHash(Sha256::digest(secret_preimage(label, nonce)).into()),
            owner,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Reveal {
    pub commitment: SecretCommitment,
    #[serde(with = "hex_bytes")]
    pub preimage: Vec<u8>,
}

pub fn check_reveal(r: &Reveal) -> bool {
    let h: [u8; 32] = Sha256::digest(&r.preimage).into();
    h == r.commitment.hash.0
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(b: u8) -> TxDigest {
        TxDigest([b; 32])
    }

    #[test]
    fn sign_verify_round_trip() {
        let a = ParticipantId::new("A");
        let sig = sign(&a, d(1));
        assert_eq!(sig, sign(&a, d(1)));
        assert!(verify(&sig, d(1)));
        assert!(!verify(&sig, d(2)));
        let mut store = SignatureStore::new();
        store.record(&sig);
        assert!(store.contains(&a, d(1)));
        assert!(!store.contains(&"B".into(), d(1)));
    }

    #[test]
    fn store_is_idempotent_and_grows() {
        let (a, b) = (ParticipantId::new("A"), ParticipantId::new("B"));
        let s = record_signature(SignatureStore::new(), &sign(&a, d(1)));
        assert_eq!(s.len(), 1);
        let s2 = record_signature(s.clone(), &sign(&a, d(1)));
        assert_eq!(s, s2);
        let s3 = record_signature(s2, &sign(&b, d(1)));
        assert_eq!(s3.signers(d(1)).cloned().collect::<Vec<_>>(), vec![a, b]);
        assert!(s3.contains_store(&s));
    }

    #[test]
    fn reveal_checks() {
        let nonce = [7u8; NONCE_LEN];
        let c = SecretCommitment::commit("L1", SecretOwner::External, &nonce);
        let good = Reveal { commitment: c.clone(), preimage: secret_preimage("L1", &nonce) };
        assert!(check_reveal(&good));
        let wrong = Reveal { commitment: c.clone(), preimage: secret_preimage("W1", &nonce) };
        assert!(!check_reveal(&wrong));
        let mut truncated = good.clone();
        truncated.preimage.pop();
        assert!(!check_reveal(&truncated));
        assert_ne!(c.hash, SecretCommitment::commit("W1", SecretOwner::External, &nonce).hash);
    }

    #[test]
    fn digest_binds_every_field() {
        let salt = [0u8; 32];
        let input = [OutPoint { txid: d(9), vout: 0 }];
        let out = [OutputSpec::continuation(10)];
        let base = tx_digest(&salt, "X", &input, 2, &out);
        assert_eq!(base, tx_digest(&salt, "X", &input, 2, &out));
        assert_ne!(base, tx_digest(&salt, "X", &[OutPoint { txid: d(8), vout: 0 }], 2, &out));
        assert_ne!(base, tx_digest(&salt, "X", &input, 3, &out));
        assert_ne!(base, tx_digest(&salt, "X", &input, 2, &[OutputSpec::continuation(11)]));
        assert_ne!(base, tx_digest(&salt, "Y", &input, 2, &out));
        assert_ne!(base, tx_digest(&[1u8; 32], "X", &input, 2, &out));
    }

    #[test]
    fn auth_digest_differs_from_tx_digest() {
        assert_ne!(auth_digest(d(1)), d(1));
        assert_eq!(auth_digest(d(1)), auth_digest(d(1)));
    }

    #[test]
    fn canonical_encoding_layout() {
        let mut c = Canonical::default();
        c.put_str("ab").put_u64(1);
        assert_eq!(c.as_bytes(), &[0, 0, 0, 2, b'a', b'b', 0, 0, 0, 0, 0, 0, 0, 1]);
    }
}
