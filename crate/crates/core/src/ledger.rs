//! Single-chain UTxO ledger with block heights and relative timelocks.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::{Beneficiary, OutputSpec, ParticipantId};
use crate::witness::{
    auth_digest, check_reveal, sign, tx_digest, verify, OutPoint, Reveal, SecretCommitment, Signature, SignatureStore,
    TxDigest,
};
use crate::{Height, Value};

/// A concrete transaction. The digest covers inputs, timelock, outputs, name
/// and the compilation salt; requirements live in the spent script and are
/// carried alongside.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxInstance {
    pub digest: TxDigest,
    pub name: String,
    pub inputs: Vec<OutPoint>,
    pub rel_timelock: u64,
    pub required_signers: BTreeSet<ParticipantId>,
    /// `AuthBy` signers of the incoming edge; they sign [`auth_digest`].
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub edge_signers: BTreeSet<ParticipantId>,
    pub required_reveals: BTreeSet<SecretCommitment>,
    pub outputs: Vec<OutputSpec>,
}

impl TxInstance {
    pub fn new(
        salt: &[u8; 32],
        name: &str,
        inputs: Vec<OutPoint>,
        rel_timelock: u64,
        required_signers: BTreeSet<ParticipantId>,
        required_reveals: BTreeSet<SecretCommitment>,
        outputs: Vec<OutputSpec>,
    ) -> Self {
        TxInstance {
            digest: tx_digest(salt, name, &inputs, rel_timelock, &outputs),
            name: name.to_string(),
            inputs,
            rel_timelock,
            required_signers,
            edge_signers: BTreeSet::new(),
            required_reveals,
            outputs,
        }
    }

    pub fn with_edge_signers(mut self, signers: BTreeSet<ParticipantId>) -> Self {
        self.edge_signers = signers;
        self
    }

    /// Zero-input transaction holding a participant's deposit.
    pub fn deposit(salt: &[u8; 32], owner: &ParticipantId, value: Value) -> Self {
        Self::new(
            salt,
            &format!("Dep_{owner}"),
            Vec::new(),
            0,
            BTreeSet::new(),
            BTreeSet::new(),
            vec![OutputSpec::to(owner.clone(), value)],
        )
    }

    pub fn outpoint(&self, vout: u32) -> OutPoint {
        OutPoint { txid: self.digest, vout }
    }

    pub fn is_deposit(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn output_value(&self) -> Value {
        self.outputs.iter().map(|o| o.value).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppendWitness {
    pub signatures: BTreeSet<Signature>,
    pub reveals: BTreeSet<Reveal>,
}

impl AppendWitness {
    /// Everything in `store` and `public` that `tx` asks for.
    pub fn assemble<'a>(
        tx: &TxInstance,
        store: &SignatureStore,
        public: impl Fn(&str) -> Option<&'a Reveal>,
    ) -> Self {
        let mut w = AppendWitness::default();
        for p in &tx.required_signers {
            if store.contains(p, tx.digest) {
                w.signatures.insert(sign(p, tx.digest));
            }
        }
        let auth = if tx.edge_signers.is_empty() { tx.digest } else { auth_digest(tx.digest) };
        for p in &tx.edge_signers {
            if store.contains(p, auth) {
                w.signatures.insert(sign(p, auth));
            }
        }
        for c in &tx.required_reveals {
            if let Some(r) = public(&c.label).filter(|r| r.commitment == *c) {
                w.reveals.insert(r.clone());
            }
        }
        w
    }

    pub fn signer_names(&self) -> Vec<String> {
        self.signatures.iter().map(|s| s.signer.to_string()).collect()
    }

    pub fn reveal_labels(&self) -> Vec<String> {
        self.reveals.iter().map(|r| r.commitment.label.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppendError {
    #[error("transaction already appended")]
    AlreadyAppended,
    #[error("missing input {}:{}", .0.txid.short(), .0.vout)]
    MissingInput(OutPoint),
    #[error("missing signature of {0}")]
    MissingSignature(ParticipantId),
    #[error("missing reveal of {0}")]
    MissingReveal(String),
    #[error("timelock not expired until height {0}")]
    TimelockNotExpired(Height),
    #[error("value mismatch: inputs {inputs}, outputs {outputs}, fee {fee}")]
    ValueMismatch { inputs: Value, outputs: Value, fee: Value },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Blocked {
    #[error("input {} is spent or was never appended", .0.txid.short())]
    MissingInput(OutPoint),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("transaction {0:?} was not appended")]
pub struct NotAppended(pub TxDigest);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainState {
    pub height: Height,
    pub fee: Value,
    appended: BTreeMap<TxDigest, (TxInstance, Height)>,
    order: Vec<TxDigest>,
    utxos: BTreeMap<OutPoint, OutputSpec>,
}

impl ChainState {
    pub fn new(fee: Value) -> Self {
        ChainState {
            height: 0,
            fee,
            appended: BTreeMap::new(),
            order: Vec::new(),
            utxos: BTreeMap::new(),
        }
    }

    pub fn tick(&mut self) {
        self.height += 1;
    }

    pub fn advance_to(&mut self, height: Height) {
        self.height = self.height.max(height);
    }

    /// Appends `tx` at the current height, or reports the first violated
    /// rule: inputs, signatures, reveals, timelock, value. On error the state
    /// is unchanged.
    pub fn try_append(&mut self, tx: &TxInstance, w: &AppendWitness) -> Result<(), AppendError> {
        if self.appended.contains_key(&tx.digest) {
            return Err(AppendError::AlreadyAppended);
        }
        let mut seen = BTreeSet::new();
        for input in &tx.inputs {
            if !seen.insert(*input) || !self.utxos.contains_key(input) {
                return Err(AppendError::MissingInput(*input));
            }
        }
        for p in &tx.required_signers {
            let ok = w.signatures.iter().any(|s| &s.signer == p && verify(s, tx.digest));
            if !ok {
                return Err(AppendError::MissingSignature(p.clone()));
            }
        }
        let auth = if tx.edge_signers.is_empty() { tx.digest } else { auth_digest(tx.digest) };
        for p in &tx.edge_signers {
            let ok = w.signatures.iter().any(|s| &s.signer == p && verify(s, auth));
            if !ok {
                return Err(AppendError::MissingSignature(p.clone()));
            }
        }
        for c in &tx.required_reveals {
            let ok = w.reveals.iter().any(|r| &r.commitment == c && check_reveal(r));
            if !ok {
                return Err(AppendError::MissingReveal(c.label.clone()));
            }
        }
        let needed = self.enabled_height(tx);
        if self.height < needed {
            return Err(AppendError::TimelockNotExpired(needed));
        }
        if !tx.is_deposit() {
            let inputs: Value = tx.inputs.iter().map(|i| self.utxos[i].value).sum();
            let outputs = tx.output_value();
            if outputs.checked_add(self.fee) != Some(inputs) {
                return Err(AppendError::ValueMismatch { inputs, outputs, fee: self.fee });
            }
        }

        for input in &tx.inputs {
            self.utxos.remove(input);
        }
        for (vout, out) in tx.outputs.iter().enumerate() {
            self.utxos.insert(tx.outpoint(vout as u32), out.clone());
        }
        self.appended.insert(tx.digest, (tx.clone(), self.height));
        self.order.push(tx.digest);
        Ok(())
    }

    fn enabled_height(&self, tx: &TxInstance) -> Height {
        tx.inputs
            .iter()
            .filter_map(|i| self.appended.get(&i.txid).map(|(_, h)| h + tx.rel_timelock))
            .max()
            .unwrap_or(0)
    }

    pub fn tx_height(&self, d: TxDigest) -> Result<Height, NotAppended> {
        self.appended.get(&d).map(|(_, h)| *h).ok_or(NotAppended(d))
    }

    pub fn is_appended(&self, d: TxDigest) -> bool {
        self.appended.contains_key(&d)
    }

    /// First height at which `tx` could be appended, given that all its
    /// inputs are currently unspent.
    pub fn enabled_at(&self, tx: &TxInstance) -> Result<Height, Blocked> {
        for input in &tx.inputs {
            if !self.utxos.contains_key(input) {
                return Err(Blocked::MissingInput(*input));
            }
        }
        Ok(self.enabled_height(tx))
    }

    pub fn is_unspent(&self, o: &OutPoint) -> bool {
        self.utxos.contains_key(o)
    }

    pub fn utxos(&self) -> impl Iterator<Item = (&OutPoint, &OutputSpec)> {
        self.utxos.iter()
    }

    /// Appended transactions in append order, with their heights.
    pub fn history(&self) -> impl Iterator<Item = (&TxInstance, Height)> {
        self.order.iter().map(|d| {
            let (tx, h) = &self.appended[d];
            (tx, *h)
        })
    }

    /// The transaction that spent `o`, if any.
    pub fn spender_of(&self, o: &OutPoint) -> Option<&TxInstance> {
        self.history().map(|(tx, _)| tx).find(|tx| tx.inputs.contains(o))
    }

    pub fn non_deposit_count(&self) -> usize {
        self.history().filter(|(tx, _)| !tx.is_deposit()).count()
    }

    pub fn utxo_value(&self) -> Value {
        self.utxos.values().map(|o| o.value).sum()
    }

    pub fn deposit_value(&self) -> Value {
        self.history().filter(|(tx, _)| tx.is_deposit()).map(|(tx, _)| tx.output_value()).sum()
    }

    /// Unspent value owned by each participant.
    pub fn payouts(&self) -> BTreeMap<ParticipantId, Value> {
        let mut out = BTreeMap::new();
        for o in self.utxos.values() {
            if let Beneficiary::Participant(p) = &o.beneficiary {
                *out.entry(p.clone()).or_default() += o.value;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::witness::{secret_preimage, sign, SecretOwner, NONCE_LEN};

    const SALT: [u8; 32] = [3; 32];

    fn signers(ps: &[&str]) -> BTreeSet<ParticipantId> {
        ps.iter().map(|&p| ParticipantId::new(p)).collect()
    }

    fn witness_for(tx: &TxInstance) -> AppendWitness {
        AppendWitness {
            signatures: tx.required_signers.iter().map(|p| sign(p, tx.digest)).collect(),
            reveals: BTreeSet::new(),
        }
    }

    fn funded() -> (ChainState, TxInstance) {
        let mut chain = ChainState::new(1);
        let dep = TxInstance::deposit(&SALT, &"A".into(), 10);
        chain.try_append(&dep, &AppendWitness::default()).unwrap();
        (chain, dep)
    }

    fn spend(parent: &TxInstance, name: &str, timelock: u64, value: Value) -> TxInstance {
        TxInstance::new(
            &SALT,
            name,
            vec![parent.outpoint(0)],
            timelock,
            signers(&["A"]),
            BTreeSet::new(),
            vec![OutputSpec::continuation(value)],
        )
    }

    #[test]
    fn tick_only_moves_height() {
        let (mut chain, dep) = funded();
        let before = chain.clone();
        for _ in 0..5 {
            chain.tick();
        }
        assert_eq!(chain.height, 5);
        assert_eq!(chain.tx_height(dep.digest), Ok(0));
        assert_eq!(chain.utxos().count(), before.utxos().count());
        assert_eq!(chain.history().count(), before.history().count());
    }

    #[test]
    fn timelock_is_relative_to_input_height() {
        let (mut chain, dep) = funded();
        let init = spend(&dep, "Init", 0, 9);
        chain.advance_to(4);
        chain.try_append(&init, &witness_for(&init)).unwrap();
        let bet = spend(&init, "Bet", 6, 8);
        assert_eq!(chain.enabled_at(&bet), Ok(10));
        chain.advance_to(9);
        assert_eq!(chain.try_append(&bet, &witness_for(&bet)), Err(AppendError::TimelockNotExpired(10)));
        chain.advance_to(10);
        chain.try_append(&bet, &witness_for(&bet)).unwrap();
        assert_eq!(chain.tx_height(bet.digest), Ok(10));
    }

    #[test]
    fn spent_input_blocks_other_children() {
        let (mut chain, dep) = funded();
        let init = spend(&dep, "Init", 0, 9);
        chain.try_append(&init, &witness_for(&init)).unwrap();
        let late = spend(&init, "Bet", 6, 8);
        let early = spend(&init, "L??", 4, 8);
        chain.advance_to(4);
        chain.try_append(&early, &witness_for(&early)).unwrap();
        assert_eq!(chain.try_append(&late, &witness_for(&late)), Err(AppendError::MissingInput(init.outpoint(0))));
        assert_eq!(chain.enabled_at(&late), Err(Blocked::MissingInput(init.outpoint(0))));
    }

    #[test]
    fn errors_follow_rule_order() {
        let (mut chain, dep) = funded();
        let mut tx = spend(&dep, "T", 3, 5);
        tx.required_reveals.insert(SecretCommitment::commit("S", SecretOwner::External, &[0; NONCE_LEN]));
        // signature is checked before reveal, reveal before timelock, timelock before value
        assert_eq!(chain.try_append(&tx, &AppendWitness::default()), Err(AppendError::MissingSignature("A".into())));
        assert_eq!(chain.try_append(&tx, &witness_for(&tx)), Err(AppendError::MissingReveal("S".into())));
        let mut w = witness_for(&tx);
        let c = tx.required_reveals.iter().next().unwrap().clone();
        w.reveals.insert(Reveal { commitment: c, preimage: secret_preimage("S", &[0; NONCE_LEN]) });
        assert_eq!(chain.try_append(&tx, &w), Err(AppendError::TimelockNotExpired(3)));
        chain.advance_to(3);
        assert_eq!(
            chain.try_append(&tx, &w),
            Err(AppendError::ValueMismatch { inputs: 10, outputs: 5, fee: 1 })
        );
        assert_eq!(chain.history().count(), 1);
    }

    #[test]
    fn edge_authorization_needs_its_own_signature() {
        let (mut chain, dep) = funded();
        let tx = spend(&dep, "Out", 0, 9).with_edge_signers(signers(&["A"]));
        assert_eq!(chain.try_append(&tx, &witness_for(&tx)), Err(AppendError::MissingSignature("A".into())));
        let mut store = SignatureStore::new();
        store.record(&sign(&"A".into(), tx.digest));
        store.record(&sign(&"A".into(), auth_digest(tx.digest)));
        let w = AppendWitness::assemble(&tx, &store, |_| None);
        chain.try_append(&tx, &w).unwrap();
    }

    #[test]
    fn wrong_digest_signature_is_rejected() {
        let (mut chain, dep) = funded();
        let tx = spend(&dep, "T", 0, 9);
        let other = spend(&dep, "U", 0, 9);
        let w = AppendWitness { signatures: [sign(&"A".into(), other.digest)].into(), reveals: BTreeSet::new() };
        assert_eq!(chain.try_append(&tx, &w), Err(AppendError::MissingSignature("A".into())));
    }

    #[test]
    fn deposits_append_at_any_height_and_not_twice() {
        let mut chain = ChainState::new(1);
        chain.advance_to(7);
        let dep = TxInstance::deposit(&SALT, &"B".into(), 3);
        chain.try_append(&dep, &AppendWitness::default()).unwrap();
        assert_eq!(chain.try_append(&dep, &AppendWitness::default()), Err(AppendError::AlreadyAppended));
        assert_eq!(chain.payouts()[&ParticipantId::new("B")], 3);
        assert!(chain.tx_height(TxDigest([0; 32])).is_err());
    }

    #[test]
    fn conservation_after_appends() {
        let (mut chain, dep) = funded();
        let a = spend(&dep, "A1", 0, 9);
        chain.try_append(&a, &witness_for(&a)).unwrap();
        let b = spend(&a, "A2", 0, 8);
        chain.try_append(&b, &witness_for(&b)).unwrap();
        assert_eq!(chain.utxo_value() + chain.fee * chain.non_deposit_count() as u64, chain.deposit_value());
        assert_eq!(chain.spender_of(&a.outpoint(0)).map(|t| t.name.as_str()), Some("A2"));
    }
}
