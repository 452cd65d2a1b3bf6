//! Helpers shared by the integration tests. Expected values here are
//! computed independently of the library's own bookkeeping.
#![allow(dead_code)]

use std::collections::BTreeSet;

use graftsim::contract::{ContractTree, NodeId};
use graftsim::description::{ContractDescription, SecretBook};
use graftsim::harness::{Mode, RevealSchedule, Scenario, BO3_CONTRACT};
use graftsim::strategy::{RollbackTarget, Strategy, StrategyKind};
use graftsim::trace::{EventKind, Trace};
use graftsim::ParticipantId;

pub fn bo3() -> (ContractTree, SecretBook) {
    ContractDescription::parse(BO3_CONTRACT).unwrap().build(7).unwrap()
}

pub fn id(tree: &ContractTree, name: &str) -> NodeId {
    tree.node_by_name(name).unwrap_or_else(|| panic!("no node {name}")).id
}

/// Reveals every secret on the path to `leaf`, one per height from 1, and
/// agrees to every `AuthBy` edge on it.
pub fn path_scenario(tree: &ContractTree, secrets: &SecretBook, leaf: NodeId, mode: Mode, t: u64) -> Scenario {
    let path = tree.path_to(leaf).unwrap();
    let mut labels = Vec::new();
    let mut agree = BTreeSet::new();
    for &n in &path {
        let node = tree.node(n).unwrap();
        labels.extend(node.reveals().map(|c| c.label.clone()));
        if !node.authorizers().is_empty() {
            agree.insert(node.name.clone());
        }
    }
    let entries: Vec<(u64, &str)> = labels.iter().enumerate().map(|(i, l)| (i as u64 + 1, l.as_str())).collect();
    Scenario::honest(tree.clone(), secrets.clone(), mode, RevealSchedule::new(&entries), t).with_agree(&agree)
}

/// Names of the non-deposit transactions appended, in order.
pub fn appended(trace: &Trace) -> Vec<String> {
    trace.appends().filter(|(_, tx, _)| !tx.is_deposit()).map(|(_, tx, _)| tx.name.clone()).collect()
}

pub fn final_leaf(trace: &Trace) -> Option<String> {
    trace.events.iter().find_map(|e| match &e.kind {
        EventKind::Finalized { leaf } => Some(leaf.clone()),
        _ => None,
    })
}

/// Every adversarial behaviour with every trigger index up to `steps`
/// (one past the deepest step) and every stipulation message index up to
/// `messages` (one past the last).
pub fn adversaries(steps: usize, messages: usize) -> Vec<Strategy> {
    let mut out = Vec::new();
    for m in 0..=messages {
        out.push(StrategyKind::Staller { at_message: Some(m), at_step: None });
    }
    for k in 0..=steps {
        out.push(StrategyKind::Staller { at_message: None, at_step: Some(k) });
        out.push(StrategyKind::SilentAborter { at_step: k });
        for mid_exchange in [false, true] {
            out.push(StrategyKind::PrematureInit { at_step: k, mid_exchange });
        }
    }
    for open in std::iter::once(None).chain((0..=steps).map(Some)) {
        for target in [RollbackTarget::Oldest, RollbackTarget::Previous] {
            out.push(StrategyKind::RollbackAttacker { open_after_step: open, target });
        }
    }
    out.into_iter().map(Strategy::new).collect()
}

pub fn permutations(items: &[ParticipantId]) -> Vec<Vec<ParticipantId>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head.clone());
            out.push(p);
        }
    }
    out
}

/// What the trace says about the failsafe, read off the raw events: the
/// origin of the last graft sealed before `Init` was appended, and the name
/// of the transaction that spent `Init`'s output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failsafe {
    pub latest_sealed: String,
    pub redeemer: Option<String>,
    pub sealed_after_init: bool,
}

pub fn failsafe(trace: &Trace) -> Option<Failsafe> {
    let mut latest = None;
    let mut at_init = None;
    let mut sealed_after_init = false;
    for e in &trace.events {
        match &e.kind {
            EventKind::GraftSealed { origin, .. } => {
                if at_init.is_some() {
                    sealed_after_init = true;
                }
                latest = Some(origin.clone());
            }
            EventKind::InitAppended => at_init = latest.clone(),
            _ => {}
        }
    }
    let init = trace.appends().find(|(_, tx, _)| tx.name == "Init")?.1.digest;
    let redeemer = trace
        .appends()
        .find(|(_, tx, _)| tx.inputs.iter().any(|o| o.txid == init))
        .map(|(_, tx, _)| tx.name.clone());
    Some(Failsafe { latest_sealed: at_init.expect("Init appended after Head"), redeemer, sealed_after_init })
}

/// Messages each participant sends during stipulation: the template set,
/// then one signature per transaction, to each of the others.
pub fn stipulation_messages(tree: &ContractTree, mode: Mode) -> usize {
    let txs = match mode {
        Mode::Onchain => tree.nodes.len(),
        Mode::Offchain => tree.nodes.len() + 2,
    };
    (tree.participants.len() - 1) * (1 + txs)
}

/// Conservation: payouts plus fees equal the deposits.
pub fn conserved(trace: &Trace, tree: &ContractTree) -> bool {
    let s = trace.summary.as_ref().unwrap();
    let paid: u64 = s.payouts.values().sum();
    paid + tree.fee * s.onchain_txs.len() as u64 == tree.deposits.values().sum::<u64>()
}
