//! Contract families used by tests and benchmarks: chains, complete binary
//! trees and seeded random trees.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contract::{ContractTree, EdgeRequirement, NodeId, TreeBuilder};
use crate::description::{DescriptionError, SecretBook};
use crate::harness::RevealSchedule;
use crate::witness::SecretOwner;
use crate::Value;

/// A generated contract with its secrets, a schedule revealing all of them
/// and the `AuthBy` nodes every participant should agree to.
#[derive(Debug, Clone)]
pub struct Generated {
    pub tree: ContractTree,
    pub secrets: SecretBook,
    pub oracle: RevealSchedule,
    pub agree: BTreeSet<String>,
}

fn participant_names(p: usize) -> Vec<String> {
    (0..p).map(|i| format!("P{i}")).collect()
}

fn builder(names: &[String], deposit: Value, fee: Value) -> TreeBuilder {
    let mut b = TreeBuilder::new(fee);
    for n in names {
        b.participant(n, deposit);
    }
    b
}

fn even_payout(b: &mut TreeBuilder, node: NodeId, names: &[String]) {
    let shares: Vec<(&str, u64)> = names.iter().map(|n| (n.as_str(), 1)).collect();
    b.payout(node, &shares);
}

/// Deposit large enough for `nodes` contract transactions plus `Head` and
/// `Init`, whatever the shape.
fn deposit_for(nodes: usize, p: usize, fee: Value) -> Value {
    (fee * (nodes as Value + 2)).div_ceil(p as Value) + 10
}

/// `n` nodes in a line, no edge requirements, `p` participants.
pub fn chain(n: usize, p: usize, fee: Value) -> ContractTree {
    assert!(n >= 1 && p >= 1);
    let names = participant_names(p);
    let mut b = builder(&names, deposit_for(n, p, fee), fee);
    let mut prev = b.node(None, "N0", Vec::new());
    for i in 1..n {
        prev = b.node(Some(prev), &format!("N{i}"), Vec::new());
    }
    even_payout(&mut b, prev, &names);
    b.build().expect("chain is well formed")
}

/// Complete binary tree of the given height (a single node has height 0).
pub fn binary(height: u32, p: usize, fee: Value) -> ContractTree {
    let names = participant_names(p);
    let n = (1usize << (height + 1)) - 1;
    let mut b = builder(&names, deposit_for(n, p, fee), fee);
    let root = b.node(None, "B", Vec::new());
    let mut level = vec![(root, "B".to_string())];
    for _ in 0..height {
        let mut next = Vec::new();
        for (id, name) in &level {
            for side in ["L", "R"] {
                let child = format!("{name}{side}");
                next.push((b.node(Some(*id), &child, Vec::new()), child));
            }
        }
        level = next;
    }
    for (id, _) in &level {
        even_payout(&mut b, *id, &names);
    }
    b.build().expect("binary tree is well formed")
}

/// Random tree of at most `max_nodes` nodes over 2 or 3 participants with
/// random `Reveal`, `AuthBy` and `After` edges.
pub fn random(seed: u64, max_nodes: usize) -> Result<Generated, DescriptionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.gen_range(2..=3);
    let names = participant_names(p);
    let n = rng.gen_range(1..=max_nodes.max(1));

    // Shape: each new node hangs off a random earlier one.
    let parents: Vec<Option<usize>> =
        (0..n).map(|i| if i == 0 { None } else { Some(rng.gen_range(0..i)) }).collect();

    // Edges, with secrets named after their node.
    let mut labels: Vec<(String, SecretOwner)> = Vec::new();
    let mut edges: Vec<Vec<EdgeRequirement>> = Vec::new();
    let mut reveal_of: Vec<Option<String>> = Vec::new();
    let mut auth_of: Vec<BTreeSet<String>> = Vec::new();
    for i in 0..n {
        let mut edge = Vec::new();
        let mut reveal = None;
        let mut auth = BTreeSet::new();
        if i > 0 {
            if rng.gen_bool(0.4) {
                let label = format!("s{i}");
                let owner = if rng.gen_bool(0.5) {
                    SecretOwner::External
                } else {
                    SecretOwner::Participant(crate::ParticipantId::new(names.choose(&mut rng).expect("participants").as_str()))
                };
                labels.push((label.clone(), owner));
                reveal = Some(label);
            }
            if rng.gen_bool(0.3) {
                let k = rng.gen_range(1..=p);
                auth = names.choose_multiple(&mut rng, k).cloned().collect();
            }
            if rng.gen_bool(0.3) {
                edge.push(EdgeRequirement::After(rng.gen_range(1..=3)));
            }
        }
        edges.push(edge);
        reveal_of.push(reveal);
        auth_of.push(auth);
    }

    let book = SecretBook::generate(labels.iter().map(|(l, o)| (l.as_str(), o.clone())), seed)?;
    let fee = rng.gen_range(1..=3);
    let mut b = builder(&names, deposit_for(n, p, fee), fee);
    for c in book.commitments().values() {
        b.secret(c.clone());
    }
    let mut ids: Vec<NodeId> = Vec::with_capacity(n);
    let mut agree = BTreeSet::new();
    for i in 0..n {
        let mut edge = edges[i].clone();
        if let Some(l) = &reveal_of[i] {
            edge.push(EdgeRequirement::Reveal(book.commitment(l).expect("generated").clone()));
        }
        if !auth_of[i].is_empty() {
            edge.push(EdgeRequirement::AuthBy(auth_of[i].iter().map(|s| crate::ParticipantId::new(s.as_str())).collect()));
            agree.insert(format!("N{i}"));
        }
        let id = b.node(parents[i].map(|j| ids[j]), &format!("N{i}"), edge);
        ids.push(id);
    }
    for i in 0..n {
        if !parents.iter().any(|&q| q == Some(i)) {
            let k = rng.gen_range(1..=p);
            let payees: Vec<(&str, u64)> =
                names.choose_multiple(&mut rng, k).map(|s| (s.as_str(), rng.gen_range(1..=3))).collect();
            b.payout(ids[i], &payees);
        }
    }
    let tree = b.build().expect("random tree is well formed");

    let mut schedule: Vec<(u64, String)> = labels.iter().map(|(l, _)| (rng.gen_range(0..=6), l.clone())).collect();
    schedule.sort();
    let entries: Vec<(u64, &str)> = schedule.iter().map(|(h, l)| (*h, l.as_str())).collect();
    Ok(Generated { tree, secrets: book, oracle: RevealSchedule::new(&entries), agree })
}
