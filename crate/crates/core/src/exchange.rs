//! Ordered, one-signature-per-message exchange between all participants.
//!
//! An exchange is a list of phases. Every participant sends every item of a
//! phase to every other participant (items in order, recipients in
//! lexicographic order) and may only start phase `k` once everybody else
//! has finished phase `k - 1`. Putting the items that unlock funds in the
//! last phase means nobody can hold a complete witness for them before all
//! earlier signatures are in everyone's hands.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::contract::{NodeId, ParticipantId};
use crate::witness::{sign, SignatureStore, TxDigest};
use crate::Height;

pub type Stores = BTreeMap<ParticipantId, SignatureStore>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Item {
    /// The full set of transaction templates.
    TxSet,
    Sign { name: String, digest: TxDigest },
}

impl Item {
    pub fn sign(name: &str, digest: TxDigest) -> Self {
        Item::Sign { name: name.to_string(), digest }
    }

    pub fn label(&self) -> &str {
        match self {
            Item::TxSet => "txset",
            Item::Sign { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub from: ParticipantId,
    pub to: ParticipantId,
    pub item: Item,
    pub phase: usize,
    /// Position in the sender's outgoing sequence.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exchange {
    participants: Vec<ParticipantId>,
    phases: Vec<Vec<Item>>,
    cursor: BTreeMap<ParticipantId, usize>,
    /// Cumulative per-sender message count at the end of each phase.
    ends: Vec<usize>,
    started: Height,
    last_activity: Height,
}

impl Exchange {
    pub fn new(participants: &BTreeSet<ParticipantId>, phases: Vec<Vec<Item>>, started: Height) -> Self {
        let fanout = participants.len().saturating_sub(1);
        let ends = phases
            .iter()
            .scan(0, |acc, p| {
                *acc += p.len() * fanout;
                Some(*acc)
            })
            .collect();
        Exchange {
            participants: participants.iter().cloned().collect(),
            cursor: participants.iter().map(|p| (p.clone(), 0)).collect(),
            phases,
            ends,
            started,
            last_activity: started,
        }
    }

    fn fanout(&self) -> usize {
        self.participants.len().saturating_sub(1)
    }

    /// Messages each participant sends over the whole exchange.
    pub fn per_sender(&self) -> usize {
        self.ends.last().copied().unwrap_or(0)
    }

    pub fn sent(&self, p: &ParticipantId) -> usize {
        self.cursor.get(p).copied().unwrap_or(0)
    }

    fn message_at(&self, from: &ParticipantId, index: usize) -> Message {
        let fanout = self.fanout();
        let phase = self.ends.partition_point(|&e| e <= index);
        let offset = index - if phase == 0 { 0 } else { self.ends[phase - 1] };
        let to = self.participants.iter().filter(|q| *q != from).nth(offset % fanout).expect("recipient");
        Message {
            from: from.clone(),
            to: to.clone(),
            item: self.phases[phase][offset / fanout].clone(),
            phase,
            index,
        }
    }

    /// The next message `from` owes, if the phase gate allows sending it.
    pub fn due(&self, from: &ParticipantId) -> Option<Message> {
        let index = *self.cursor.get(from)?;
        if index >= self.per_sender() {
            return None;
        }
        let phase = self.ends.partition_point(|&e| e <= index);
        if phase > 0 {
            let gate = self.ends[phase - 1];
            if self.cursor.iter().any(|(q, &c)| q != from && c < gate) {
                return None;
            }
        }
        Some(self.message_at(from, index))
    }

    /// Sends the due message of `from` and records the signature in the
    /// recipient's store.
    pub fn send(&mut self, from: &ParticipantId, stores: &mut Stores, height: Height) -> Option<Message> {
        let msg = self.due(from)?;
        if let Item::Sign { digest, .. } = &msg.item {
            let sig = sign(from, *digest);
            match stores.get_mut(&msg.to) {
                Some(store) => store.record(&sig),
                None => stores.entry(msg.to.clone()).or_default().record(&sig),
            }
        }
        *self.cursor.get_mut(from).expect("participant") += 1;
        self.last_activity = height;
        Some(msg)
    }

    /// Every participant signs every item locally.
    pub fn sign_own(&self, stores: &mut Stores) {
        for p in &self.participants {
            let store = stores.entry(p.clone()).or_default();
            for item in self.phases.iter().flatten() {
                if let Item::Sign { digest, .. } = item {
                    store.record(&sign(p, *digest));
                }
            }
        }
    }

    pub fn is_complete(&self) -> bool {
        let total = self.per_sender();
        self.cursor.values().all(|&c| c >= total)
    }

    /// `p` has nothing it may send but the exchange is not over.
    pub fn is_blocked(&self, p: &ParticipantId) -> bool {
        self.due(p).is_none() && !self.is_complete()
    }

    pub fn started(&self) -> Height {
        self.started
    }

    pub fn last_activity(&self) -> Height {
        self.last_activity
    }

    pub fn signature_items(&self) -> impl Iterator<Item = (&str, TxDigest)> {
        self.phases.iter().flatten().filter_map(|i| match i {
            Item::Sign { name, digest } => Some((name.as_str(), *digest)),
            Item::TxSet => None,
        })
    }

    /// Runs the exchange to completion, letting `withhold` veto individual
    /// messages. Returns the messages sent, or the first participant whose
    /// withheld message blocked progress.
    pub fn run(
        &mut self,
        stores: &mut Stores,
        height: Height,
        mut withhold: impl FnMut(&Message) -> bool,
    ) -> Result<Vec<Message>, (ParticipantId, Vec<Message>)> {
        let mut sent = Vec::new();
        let mut stalled: Option<ParticipantId> = None;
        loop {
            let mut progressed = false;
            for p in self.participants.clone() {
                while let Some(msg) = self.due(&p) {
                    if withhold(&msg) {
                        stalled.get_or_insert(p.clone());
                        break;
                    }
                    sent.push(self.send(&p, stores, height).expect("due message"));
                    progressed = true;
                }
            }
            if self.is_complete() {
                return Ok(sent);
            }
            if !progressed {
                let who = stalled.unwrap_or_else(|| self.participants[0].clone());
                return Err((who, sent));
            }
        }
    }
}

/// A pending agreement on the next contract step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposal {
    pub child: NodeId,
    pub proposer: ParticipantId,
    /// Participants whose agreement is needed (the proposer included).
    pub required: BTreeSet<ParticipantId>,
    pub agreed: BTreeSet<ParticipantId>,
    pub refused_by: Option<ParticipantId>,
    pub since: Height,
}

impl Proposal {
    pub fn new(child: NodeId, proposer: ParticipantId, required: BTreeSet<ParticipantId>, since: Height) -> Self {
        let mut agreed = BTreeSet::new();
        if required.contains(&proposer) {
            agreed.insert(proposer.clone());
        }
        Proposal { child, proposer, required, agreed, refused_by: None, since }
    }

    pub fn awaiting(&self, p: &ParticipantId) -> bool {
        self.refused_by.is_none() && self.required.contains(p) && !self.agreed.contains(p)
    }

    pub fn is_accepted(&self) -> bool {
        self.refused_by.is_none() && self.agreed.is_superset(&self.required)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps(names: &[&str]) -> BTreeSet<ParticipantId> {
        names.iter().map(|&n| ParticipantId::new(n)).collect()
    }

    fn items(n: u8) -> Vec<Item> {
        (0..n).map(|i| Item::sign(&format!("T{i}"), TxDigest([i; 32]))).collect()
    }

    #[test]
    fn message_counts_and_order() {
        let parts = ps(&["A", "B", "C"]);
        let mut ex = Exchange::new(&parts, vec![vec![Item::TxSet], items(2), vec![Item::sign("R", TxDigest([9; 32]))]], 0);
        assert_eq!(ex.per_sender(), (1 + 2 + 1) * 2);
        let a = ParticipantId::new("A");
        let first = ex.due(&a).unwrap();
        assert_eq!((first.to.as_str(), first.item.label()), ("B", "txset"));
        let mut stores = Stores::new();
        let sent = ex.run(&mut stores, 0, |_| false).unwrap();
        assert_eq!(sent.len(), 3 * 8);
        assert!(ex.is_complete());
        // every participant holds every other participant's signature on every item
        for p in &parts {
            for q in &parts {
                if p != q {
                    assert!(stores[p].contains(q, TxDigest([9; 32])));
                }
            }
        }
    }

    #[test]
    fn last_phase_waits_for_everyone() {
        let parts = ps(&["A", "B"]);
        let mut ex = Exchange::new(&parts, vec![items(1), vec![Item::sign("R", TxDigest([9; 32]))]], 0);
        let (a, b) = (ParticipantId::new("A"), ParticipantId::new("B"));
        let mut stores = Stores::new();
        ex.send(&a, &mut stores, 0).unwrap();
        assert!(ex.due(&a).is_none(), "A must wait for B's first-phase signature");
        assert!(ex.is_blocked(&a));
        ex.send(&b, &mut stores, 0).unwrap();
        assert_eq!(ex.due(&a).unwrap().phase, 1);
    }

    #[test]
    fn withholding_stalls_and_names_the_withholder() {
        let parts = ps(&["A", "B"]);
        let mut ex = Exchange::new(&parts, vec![items(3), vec![Item::sign("R", TxDigest([9; 32]))]], 0);
        let mut stores = Stores::new();
        let err = ex.run(&mut stores, 0, |m| m.from.as_str() == "B" && m.index == 1).unwrap_err();
        assert_eq!(err.0.as_str(), "B");
        assert!(!stores.get(&ParticipantId::new("B")).is_some_and(|s| s.contains(&"A".into(), TxDigest([9; 32]))));
    }

    #[test]
    fn single_participant_exchange_is_trivially_complete() {
        let ex = Exchange::new(&ps(&["A"]), vec![items(2)], 0);
        assert!(ex.is_complete());
        assert_eq!(ex.per_sender(), 0);
    }

    #[test]
    fn proposal_acceptance() {
        let mut p = Proposal::new(NodeId(1), "A".into(), ps(&["A", "B"]), 0);
        assert!(p.awaiting(&"B".into()));
        assert!(!p.is_accepted());
        p.agreed.insert("B".into());
        assert!(p.is_accepted());
        p.refused_by = Some("B".into());
        assert!(!p.is_accepted());
    }
}
