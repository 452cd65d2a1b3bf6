//! Contract trees: transaction templates connected by edges that carry
//! redemption requirements, plus the structural queries the protocols need.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::witness::SecretCommitment;
use crate::Value;

/// Identifier of a contract participant. Ordering is lexicographic and is
/// used as the canonical tie-break everywhere in the simulator. Cheap to
/// clone.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParticipantId(Arc<str>);

impl ParticipantId {
    pub fn new(name: impl Into<String>) -> Self {
        ParticipantId(Arc::from(name.into()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ParticipantId {
    fn from(s: &str) -> Self {
        ParticipantId::new(s)
    }
}

/// Dense node identifier. Trees produced by [`TreeBuilder`] number their
/// nodes in preorder starting from the root at `0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Requirement attached to the edge from a parent into a node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeRequirement {
    /// Explicit authorization by every listed participant.
    AuthBy(BTreeSet<ParticipantId>),
    /// Preimage of a committed secret.
    Reveal(SecretCommitment),
    /// Relative timelock in blocks, measured from the parent's append height.
    After(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Beneficiary {
    Participant(ParticipantId),
    /// The output carries the contract state and is spent by a child.
    Continuation,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OutputSpec {
    pub value: Value,
    pub beneficiary: Beneficiary,
}

impl OutputSpec {
    pub fn continuation(value: Value) -> Self {
        OutputSpec { value, beneficiary: Beneficiary::Continuation }
    }

    pub fn to(participant: ParticipantId, value: Value) -> Self {
        OutputSpec { value, beneficiary: Beneficiary::Participant(participant) }
    }
}

/// Weighted share of a leaf's balance.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PayoutShare {
    pub to: ParticipantId,
    pub share: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTemplate {
    pub id: NodeId,
    pub name: String,
    /// Requirements to redeem the parent into this node.
    pub edge: Vec<EdgeRequirement>,
    /// Leaf payout weights; empty for inner nodes.
    pub payout: Vec<PayoutShare>,
    /// Outputs when the contract is executed purely on-chain.
    pub outputs: Vec<OutputSpec>,
    pub children: Vec<NodeId>,
}

impl NodeTemplate {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn reveals(&self) -> impl Iterator<Item = &SecretCommitment> {
        self.edge.iter().filter_map(|r| match r {
            EdgeRequirement::Reveal(c) => Some(c),
            _ => None,
        })
    }

    pub fn authorizers(&self) -> BTreeSet<ParticipantId> {
        let mut sets = self.edge.iter().filter_map(|r| match r {
            EdgeRequirement::AuthBy(s) => Some(s),
            _ => None,
        });
        match (sets.next(), sets.next()) {
            (None, _) => BTreeSet::new(),
            (Some(s), None) => s.clone(),
            (Some(a), Some(b)) => a.iter().chain(b).chain(sets.flatten()).cloned().collect(),
        }
    }

    /// Total `After` delay on the incoming edge.
    pub fn delay(&self) -> u64 {
        self.edge
            .iter()
            .map(|r| match r {
                EdgeRequirement::After(d) => *d,
                _ => 0,
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractTree {
    pub participants: BTreeSet<ParticipantId>,
    pub deposits: BTreeMap<ParticipantId, Value>,
    pub secrets: BTreeMap<String, SecretCommitment>,
    pub root: NodeId,
    pub nodes: Vec<NodeTemplate>,
    /// Fee paid by every appended contract transaction.
    pub fee: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContractError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("fees exceed deposits at node {0}")]
    NegativeBalance(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StructuralError {
    #[error("EmptyParticipants")]
    EmptyParticipants,
    #[error("MissingDeposit({0})")]
    MissingDeposit(ParticipantId),
    #[error("UnknownParticipant({0})")]
    UnknownParticipant(ParticipantId),
    #[error("DuplicateId({0})")]
    DuplicateId(NodeId),
    #[error("DuplicateName({0})")]
    DuplicateName(String),
    #[error("UnknownRoot({0})")]
    UnknownRoot(NodeId),
    #[error("UnknownChild({parent} -> {child})")]
    UnknownChild { parent: NodeId, child: NodeId },
    #[error("NotATree({0})")]
    NotATree(NodeId),
    #[error("Cycle({0})")]
    Cycle(NodeId),
    #[error("Orphan({0})")]
    Orphan(NodeId),
    #[error("UndeclaredSecret({node}, {label})")]
    UndeclaredSecret { node: NodeId, label: String },
    #[error("DuplicateRequirement({0})")]
    DuplicateRequirement(NodeId),
    #[error("LeafWithoutPayout({0})")]
    LeafWithoutPayout(NodeId),
    #[error("PayoutOnInnerNode({0})")]
    PayoutOnInnerNode(NodeId),
    #[error("NegativeBalance({0})")]
    NegativeBalance(NodeId),
    #[error("BalanceMismatch({node}: expected {expected}, outputs sum to {actual})")]
    BalanceMismatch { node: NodeId, expected: Value, actual: Value },
}

impl ContractTree {
    pub fn node(&self, id: NodeId) -> Option<&NodeTemplate> {
        match self.nodes.get(id.index()) {
            Some(n) if n.id == id => Some(n),
            _ => self.nodes.iter().find(|n| n.id == id),
        }
    }

    pub fn get(&self, id: NodeId) -> Result<&NodeTemplate, ContractError> {
        self.node(id).ok_or(ContractError::UnknownNode(id))
    }

    pub fn node_by_name(&self, name: &str) -> Option<&NodeTemplate> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn name(&self, id: NodeId) -> &str {
        self.node(id).map(|n| n.name.as_str()).unwrap_or("?")
    }

    pub fn total_deposits(&self) -> Value {
        self.deposits.values().sum()
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.children.contains(&id)).map(|n| n.id)
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.node(id).is_some_and(NodeTemplate::is_leaf)
    }

    /// Nodes of the subtree rooted at `from`, in preorder.
    pub fn preorder(&self, from: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        let mut stack = vec![from];
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            let Some(node) = self.node(id) else { continue };
            out.push(id);
            stack.extend(node.children.iter().rev().copied());
        }
        out
    }

    /// Root-to-`id` path, both ends included.
    pub fn path_to(&self, id: NodeId) -> Result<Vec<NodeId>, ContractError> {
        self.get(id)?;
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            if path.contains(&p) {
                break;
            }
            path.push(p);
            cur = p;
        }
        path.reverse();
        Ok(path)
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.preorder(self.root).into_iter().filter(|&id| self.is_leaf(id)).collect()
    }

    /// Concrete outputs of `id` when its transaction has `available` value
    /// left after paying its own fee.
    pub fn outputs_for(&self, id: NodeId, available: Value) -> Result<Vec<OutputSpec>, ContractError> {
        let node = self.get(id)?;
        if !node.is_leaf() {
            return Ok(vec![OutputSpec::continuation(available)]);
        }
        Ok(split_payout(&node.payout, available))
    }

    /// Recomputes every node's on-chain outputs from `balance_at`.
    pub fn refresh_outputs(&mut self) -> Result<(), ContractError> {
        let ids: Vec<NodeId> = self.nodes.iter().map(|n| n.id).collect();
        for id in ids {
            let balance = balance_at(self, id)?;
            let outputs = self.outputs_for(id, balance)?;
            if let Some(node) = self.nodes.iter_mut().find(|n| n.id == id) {
                node.outputs = outputs;
            }
        }
        Ok(())
    }
}

/// Splits `available` by weight. The integer remainder goes to the
/// lexicographically first payee.
pub fn split_payout(payout: &[PayoutShare], available: Value) -> Vec<OutputSpec> {
    let mut merged: BTreeMap<&ParticipantId, u64> = BTreeMap::new();
    for s in payout {
        *merged.entry(&s.to).or_default() += s.share;
    }
    let total: u128 = merged.values().map(|&w| w as u128).sum();
    if total == 0 {
        return Vec::new();
    }
    let mut outputs: Vec<OutputSpec> = merged
        .iter()
        .map(|(p, &w)| OutputSpec::to((*p).clone(), (available as u128 * w as u128 / total) as Value))
        .collect();
    let assigned: Value = outputs.iter().map(|o| o.value).sum();
    outputs[0].value += available - assigned;
    outputs
}

/// Checks every structural and value invariant of a contract tree and
/// returns one error per violation.
pub fn validate_tree(tree: &ContractTree) -> Vec<StructuralError> {
    let mut errors = Vec::new();

    if tree.participants.is_empty() {
        errors.push(StructuralError::EmptyParticipants);
    }
    for p in &tree.participants {
        if !tree.deposits.contains_key(p) {
            errors.push(StructuralError::MissingDeposit(p.clone()));
        }
    }
    let mut unknown = BTreeSet::new();
    for p in tree.deposits.keys() {
        if !tree.participants.contains(p) {
            unknown.insert(p.clone());
        }
    }
    for c in tree.secrets.values() {
        if let crate::witness::SecretOwner::Participant(p) = &c.owner {
            if !tree.participants.contains(p) {
                unknown.insert(p.clone());
            }
        }
    }

    // Identity and name uniqueness.
    let mut index: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut names = BTreeSet::new();
    for (i, node) in tree.nodes.iter().enumerate() {
        if index.insert(node.id, i).is_some() {
            errors.push(StructuralError::DuplicateId(node.id));
        }
        if !names.insert(node.name.as_str()) {
            errors.push(StructuralError::DuplicateName(node.name.clone()));
        }
    }

    // Edge requirements and payees.
    for node in &tree.nodes {
        let mut seen = BTreeSet::new();
        if node.edge.iter().any(|r| !seen.insert(r)) {
            errors.push(StructuralError::DuplicateRequirement(node.id));
        }
        for req in &node.edge {
            match req {
                EdgeRequirement::AuthBy(signers) => {
                    for s in signers {
                        if !tree.participants.contains(s) {
                            unknown.insert(s.clone());
                        }
                    }
                }
                EdgeRequirement::Reveal(c) => {
                    if tree.secrets.get(&c.label) != Some(c) {
                        errors.push(StructuralError::UndeclaredSecret {
                            node: node.id,
                            label: c.label.clone(),
                        });
                    }
                }
                EdgeRequirement::After(_) => {}
            }
        }
        for s in &node.payout {
            if !tree.participants.contains(&s.to) {
                unknown.insert(s.to.clone());
            }
        }
    }
    errors.extend(unknown.into_iter().map(StructuralError::UnknownParticipant));

    // Shape: single root, single parent, no cycles, everything reachable.
    let mut structural = false;
    if !index.contains_key(&tree.root) {
        errors.push(StructuralError::UnknownRoot(tree.root));
        return errors;
    }
    let mut parents: BTreeMap<NodeId, usize> = BTreeMap::new();
    for node in &tree.nodes {
        for &child in &node.children {
            if !index.contains_key(&child) {
                errors.push(StructuralError::UnknownChild { parent: node.id, child });
                structural = true;
                continue;
            }
            *parents.entry(child).or_default() += 1;
        }
    }
    for (&id, &count) in &parents {
        if count > 1 || (id == tree.root && count > 0) {
            errors.push(StructuralError::NotATree(id));
            structural = true;
        }
    }
    let children_of = |id: NodeId| -> Vec<NodeId> {
        index
            .get(&id)
            .map(|&i| tree.nodes[i].children.iter().copied().filter(|c| index.contains_key(c)).collect())
            .unwrap_or_default()
    };
    // Three-colour DFS over every node, root first.
    let mut colour: BTreeMap<NodeId, u8> = BTreeMap::new();
    let mut cycles = BTreeSet::new();
    let starts = std::iter::once(tree.root).chain(tree.nodes.iter().map(|n| n.id));
    for start in starts {
        if colour.contains_key(&start) {
            continue;
        }
        let mut stack: Vec<(NodeId, usize)> = vec![(start, 0)];
        colour.insert(start, 1);
        while let Some(top) = stack.last_mut() {
            let (id, next) = *top;
            let kids = children_of(id);
            if next < kids.len() {
                top.1 += 1;
                let child = kids[next];
                match colour.get(&child) {
                    None => {
                        colour.insert(child, 1);
                        stack.push((child, 0));
                    }
                    Some(1) => {
                        cycles.insert(child);
                    }
                    _ => {}
                }
            } else {
                colour.insert(id, 2);
                stack.pop();
            }
        }
    }
    if !cycles.is_empty() {
        structural = true;
        errors.extend(cycles.into_iter().map(StructuralError::Cycle));
    }
    let reachable: BTreeSet<NodeId> = tree.preorder(tree.root).into_iter().collect();
    for node in &tree.nodes {
        if !reachable.contains(&node.id) {
            errors.push(StructuralError::Orphan(node.id));
            structural = true;
        }
    }
    if structural || errors.iter().any(|e| matches!(e, StructuralError::DuplicateId(_))) {
        return errors;
    }

    // Values along every root-to-leaf path.
    let total = tree.total_deposits();
    let mut stack = vec![(tree.root, 1u64)];
    while let Some((id, depth)) = stack.pop() {
        let node = tree.node(id).expect("reachable node exists");
        let Some(balance) = tree.fee.checked_mul(depth).and_then(|f| total.checked_sub(f)) else {
            errors.push(StructuralError::NegativeBalance(id));
            continue;
        };
        if node.is_leaf() {
            if node.payout.iter().map(|s| s.share).sum::<u64>() == 0 {
                errors.push(StructuralError::LeafWithoutPayout(id));
            }
        } else if !node.payout.is_empty() {
            errors.push(StructuralError::PayoutOnInnerNode(id));
        }
        let well_formed = if node.is_leaf() {
            node.outputs.iter().all(|o| matches!(o.beneficiary, Beneficiary::Participant(_)))
        } else {
            node.outputs.len() == 1 && node.outputs[0].beneficiary == Beneficiary::Continuation
        };
        let actual: Value = node.outputs.iter().map(|o| o.value).sum();
        if !well_formed || actual != balance {
            errors.push(StructuralError::BalanceMismatch { node: id, expected: balance, actual });
        }
        for &c in node.children.iter().rev() {
            stack.push((c, depth + 1));
        }
    }
    errors
}

/// Number of edges on the longest path from `node` down to a leaf.
pub fn subtree_height(tree: &ContractTree, node: NodeId) -> Result<u64, ContractError> {
    tree.get(node)?;
    let mut best = 0;
    let mut stack = vec![(node, 0u64)];
    let mut seen = BTreeSet::new();
    while let Some((id, depth)) = stack.pop() {
        if !seen.insert(id) {
            continue;
        }
        best = best.max(depth);
        if let Some(n) = tree.node(id) {
            stack.extend(n.children.iter().map(|&c| (c, depth + 1)));
        }
    }
    Ok(best)
}

/// Spendable balance after the node's transaction is appended in a purely
/// on-chain execution: deposits minus one fee per transaction on the path.
pub fn balance_at(tree: &ContractTree, node: NodeId) -> Result<Value, ContractError> {
    let depth = tree.path_to(node)?.len() as u64;
    tree.fee
        .checked_mul(depth)
        .and_then(|f| tree.total_deposits().checked_sub(f))
        .ok_or(ContractError::NegativeBalance(node))
}

/// A copied subtree with fresh preorder ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub tree: ContractTree,
    /// Fresh id → id in the source tree.
    pub provenance: BTreeMap<NodeId, NodeId>,
}

impl Fragment {
    pub fn origin(&self, fresh: NodeId) -> Option<NodeId> {
        self.provenance.get(&fresh).copied()
    }
}

/// Deep copy of the subtree rooted at `node`. The copy's root loses its edge
/// requirements; everything else is preserved.
pub fn extract_subtree(tree: &ContractTree, node: NodeId) -> Result<Fragment, ContractError> {
    tree.get(node)?;
    let order = tree.preorder(node);
    let fresh: BTreeMap<NodeId, NodeId> =
        order.iter().enumerate().map(|(i, &old)| (old, NodeId(i as u32))).collect();
    let mut nodes = Vec::with_capacity(order.len());
    for &old in &order {
        let src = tree.get(old)?;
        nodes.push(NodeTemplate {
            id: fresh[&old],
            name: src.name.clone(),
            edge: if old == node { Vec::new() } else { src.edge.clone() },
            payout: src.payout.clone(),
            outputs: src.outputs.clone(),
            children: src.children.iter().map(|c| fresh[c]).collect(),
        });
    }
    Ok(Fragment {
        tree: ContractTree {
            participants: tree.participants.clone(),
            deposits: tree.deposits.clone(),
            secrets: tree.secrets.clone(),
            root: NodeId(0),
            nodes,
            fee: tree.fee,
        },
        provenance: fresh.into_iter().map(|(old, new)| (new, old)).collect(),
    })
}

/// Incremental construction of contract trees. Nodes may be added in any
/// order; [`TreeBuilder::build`] renumbers them in preorder and fills in the
/// on-chain outputs.
#[derive(Debug, Clone, Default)]
pub struct TreeBuilder {
    participants: BTreeSet<ParticipantId>,
    deposits: BTreeMap<ParticipantId, Value>,
    secrets: BTreeMap<String, SecretCommitment>,
    nodes: Vec<NodeTemplate>,
    fee: Value,
}

impl TreeBuilder {
    pub fn new(fee: Value) -> Self {
        TreeBuilder { fee, ..Default::default() }
    }

    pub fn participant(&mut self, name: &str, deposit: Value) -> ParticipantId {
        let p = ParticipantId::new(name);
        self.participants.insert(p.clone());
        self.deposits.insert(p.clone(), deposit);
        p
    }

    pub fn secret(&mut self, commitment: SecretCommitment) {
        self.secrets.insert(commitment.label.clone(), commitment);
    }

    /// Adds a node; the first node added is the root.
    pub fn node(&mut self, parent: Option<NodeId>, name: &str, edge: Vec<EdgeRequirement>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(NodeTemplate {
            id,
            name: name.to_string(),
            edge,
            payout: Vec::new(),
            outputs: Vec::new(),
            children: Vec::new(),
        });
        if let Some(p) = parent {
            self.nodes[p.index()].children.push(id);
        }
        id
    }

    pub fn payout(&mut self, node: NodeId, shares: &[(&str, u64)]) {
        self.nodes[node.index()].payout =
            shares.iter().map(|&(p, s)| PayoutShare { to: ParticipantId::new(p), share: s }).collect();
    }

    pub fn build(self) -> Result<ContractTree, Vec<StructuralError>> {
        let mut tree = ContractTree {
            participants: self.participants,
            deposits: self.deposits,
            secrets: self.secrets,
            root: NodeId(0),
            nodes: self.nodes,
            fee: self.fee,
        };
        if tree.nodes.is_empty() {
            return Err(vec![StructuralError::UnknownRoot(NodeId(0))]);
        }
        let order = tree.preorder(tree.root);
        if order.len() == tree.nodes.len() {
            let fresh: BTreeMap<NodeId, NodeId> =
                order.iter().enumerate().map(|(i, &old)| (old, NodeId(i as u32))).collect();
            let mut nodes: Vec<NodeTemplate> = order
                .iter()
                .map(|old| tree.nodes[old.index()].clone())
                .collect();
            for n in &mut nodes {
                n.id = fresh[&n.id];
                for c in &mut n.children {
                    *c = fresh[c];
                }
            }
            tree.nodes = nodes;
        }
        let _ = tree.refresh_outputs();
        let errors = validate_tree(&tree);
        if errors.is_empty() {
            Ok(tree)
        } else {
            Err(errors)
        }
    }
}
