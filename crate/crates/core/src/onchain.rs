//! Standard execution. Participants exchange every transaction, then their
//! implicit signatures on every non-root transaction, then the signatures
//! that spend their deposits into the root. After that the contract advances
//! one appended transaction per step.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::contract::{
    validate_tree, ContractError, ContractTree, EdgeRequirement, NodeId, ParticipantId, StructuralError,
};
use crate::exchange::{Exchange, Item, Message, Stores};
use crate::harness::{RevealSchedule, Scenario};
use crate::ledger::{AppendError, AppendWitness, ChainState, TxInstance};
use crate::trace::Trace;
use crate::witness::{Canonical, OutPoint};
use crate::{Height, Value};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("invalid contract: {0:?}")]
    InvalidTree(Vec<StructuralError>),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error("session already started")]
    AlreadyStarted,
    #[error("session not started")]
    NotStarted,
    #[error("{child} is not a child of {current}")]
    NotAChild { current: NodeId, child: NodeId },
    #[error("requirement unmet: {0}")]
    RequirementUnmet(String),
    #[error("stipulation aborted by {0}")]
    StipulationAborted(ParticipantId),
    #[error("exchange interrupted by {0}")]
    Interrupted(ParticipantId),
    #[error("append of {name} failed: {error}")]
    Append { name: String, error: AppendError },
    #[error("execution left the requested path at {0}")]
    PathDiverged(String),
}

/// Compilation salt: a digest of the whole contract and a domain string,
/// so that different compilations never share transaction digests.
pub fn contract_salt(tree: &ContractTree, domain: &str) -> [u8; 32] {
    let mut c = Canonical::new("graftsim/contract/v1");
    c.put_str(domain).put_u64(tree.fee).put_u32(tree.deposits.len() as u32);
    for (p, v) in &tree.deposits {
        c.put_str(p.as_str()).put_u64(*v);
    }
    c.put_u32(tree.root.0).put_u32(tree.nodes.len() as u32);
    for n in &tree.nodes {
        c.put_u32(n.id.0).put_str(&n.name).put_u32(n.edge.len() as u32);
        for e in &n.edge {
            match e {
                EdgeRequirement::AuthBy(ps) => {
                    c.put_u8(0).put_u32(ps.len() as u32);
                    for p in ps {
                        c.put_str(p.as_str());
                    }
                }
                EdgeRequirement::Reveal(s) => {
                    c.put_u8(1).put_str(&s.label).put_bytes(&s.hash.0);
                }
                EdgeRequirement::After(d) => {
                    c.put_u8(2).put_u64(*d);
                }
            }
        }
        c.put_u32(n.payout.len() as u32);
        for s in &n.payout {
            c.put_str(s.to.as_str()).put_u64(s.share);
        }
        c.put_u32(n.children.len() as u32);
        for ch in &n.children {
            c.put_u32(ch.0);
        }
    }
    c.sha256()
}

/// One deposit transaction per participant, in participant order.
pub fn deposit_instances(tree: &ContractTree) -> BTreeMap<ParticipantId, TxInstance> {
    let salt = contract_salt(tree, "deposits");
    tree.deposits
        .iter()
        .map(|(p, v)| (p.clone(), TxInstance::deposit(&salt, p, *v)))
        .collect()
}

pub fn deposit_outpoints(deposits: &BTreeMap<ParticipantId, TxInstance>) -> Vec<OutPoint> {
    deposits.values().map(|d| d.outpoint(0)).collect()
}

/// Turns the subtree under `from` into concrete transactions. The root
/// spends `inputs` (worth `input_value`) after `root_timelock` blocks; every
/// other node spends its parent's single continuation output. Each instance
/// requires every participant's implicit signature plus its edge
/// requirements; the root's own edge is honoured only if `root_edge`.
pub fn instantiate(
    tree: &ContractTree,
    salt: &[u8; 32],
    from: NodeId,
    inputs: Vec<OutPoint>,
    input_value: Value,
    root_timelock: u64,
    root_edge: bool,
) -> Result<BTreeMap<NodeId, TxInstance>, ProtocolError> {
    let mut out: BTreeMap<NodeId, TxInstance> = BTreeMap::new();
    for id in tree.preorder(from) {
        let node = tree.get(id)?;
        let (ins, value, mut timelock) = if id == from {
            (inputs.clone(), input_value, root_timelock)
        } else {
            let parent = tree.parent(id).ok_or(ContractError::UnknownNode(id))?;
            let p = &out[&parent];
            (vec![p.outpoint(0)], p.output_value(), 0)
        };
        let with_edge = id != from || root_edge;
        if with_edge {
            timelock += node.delay();
        }
        let available = value.checked_sub(tree.fee).ok_or(ContractError::NegativeBalance(id))?;
        let outputs = tree.outputs_for(id, available)?;
        let (auth, reveals) = if with_edge {
            (node.authorizers(), node.reveals().cloned().collect())
        } else {
            (BTreeSet::new(), BTreeSet::new())
        };
        let tx = TxInstance::new(salt, &node.name, ins, timelock, tree.participants.clone(), reveals, outputs)
            .with_edge_signers(auth);
        out.insert(id, tx);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OnchainCompilation {
    pub deposits: BTreeMap<ParticipantId, TxInstance>,
    pub instances: BTreeMap<NodeId, TxInstance>,
}

/// The root spends every deposit; each child spends its parent.
pub fn compile_onchain(tree: &ContractTree) -> Result<OnchainCompilation, ProtocolError> {
    let errors = validate_tree(tree);
    if !errors.is_empty() {
        return Err(ProtocolError::InvalidTree(errors));
    }
    let deposits = deposit_instances(tree);
    let instances = instantiate(
        tree,
        &contract_salt(tree, "onchain"),
        tree.root,
        deposit_outpoints(&deposits),
        tree.total_deposits(),
        0,
        true,
    )?;
    Ok(OnchainCompilation { deposits, instances })
}

/// Appends every deposit. Used at height 0.
pub fn fund(chain: &mut ChainState, deposits: &BTreeMap<ParticipantId, TxInstance>) -> Result<(), ProtocolError> {
    for d in deposits.values() {
        chain
            .try_append(d, &AppendWitness::default())
            .map_err(|error| ProtocolError::Append { name: d.name.clone(), error })?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OnchainSession {
    pub tree: ContractTree,
    /// The contract node each instance realizes.
    pub instances: BTreeMap<NodeId, TxInstance>,
    /// Node whose transaction was appended last.
    pub current: Option<NodeId>,
    /// Children whose authorization was refused or timed out.
    pub refused: BTreeSet<NodeId>,
    root: NodeId,
}

impl OnchainSession {
    pub fn new(tree: &ContractTree) -> Result<(Self, OnchainCompilation), ProtocolError> {
        let comp = compile_onchain(tree)?;
        let session = OnchainSession {
            tree: tree.clone(),
            instances: comp.instances.clone(),
            current: None,
            refused: BTreeSet::new(),
            root: tree.root,
        };
        Ok((session, comp))
    }

    /// Continues on-chain from a graft whose root (for `origin`) is already
    /// appended.
    pub fn from_graft(tree: &ContractTree, instances: BTreeMap<NodeId, TxInstance>, origin: NodeId) -> Self {
        OnchainSession { tree: tree.clone(), instances, current: Some(origin), refused: BTreeSet::new(), root: origin }
    }

    pub fn root_instance(&self) -> &TxInstance {
        &self.instances[&self.root]
    }

    /// Stipulation phases: the transaction set, implicit signatures on every
    /// non-root instance in preorder, then the deposit-spending root.
    pub fn stipulation_phases(&self) -> Vec<Vec<Item>> {
        let body = self
            .tree
            .preorder(self.root)
            .into_iter()
            .filter(|&id| id != self.root)
            .map(|id| Item::sign(&self.instances[&id].name, self.instances[&id].digest))
            .collect();
        let root = self.root_instance();
        vec![vec![Item::TxSet], body, vec![Item::sign(&root.name, root.digest)]]
    }

    pub fn stipulation_exchange(&self, started: Height) -> Exchange {
        Exchange::new(&self.tree.participants, self.stipulation_phases(), started)
    }

    /// Runs the whole stipulation at the current height and appends the root.
    /// `withhold` may veto messages; if it does, nothing is appended.
    pub fn stipulate(
        &mut self,
        chain: &mut ChainState,
        stores: &mut Stores,
        withhold: impl FnMut(&Message) -> bool,
    ) -> Result<Vec<Message>, ProtocolError> {
        if self.current.is_some() {
            return Err(ProtocolError::AlreadyStarted);
        }
        let mut ex = self.stipulation_exchange(chain.height);
        ex.sign_own(stores);
        let sent = ex.run(stores, chain.height, withhold).map_err(|(p, _)| ProtocolError::StipulationAborted(p))?;
        let first = self.tree.participants.iter().next().expect("nonempty participants");
        let root = self.root_instance().clone();
        let w = AppendWitness::assemble(&root, &stores[first], |_| None);
        chain
            .try_append(&root, &w)
            .map_err(|error| ProtocolError::Append { name: root.name.clone(), error })?;
        self.current = Some(self.root);
        Ok(sent)
    }

    pub fn children(&self) -> Vec<NodeId> {
        self.current
            .and_then(|c| self.tree.node(c))
            .map(|n| n.children.clone())
            .unwrap_or_default()
    }

    pub fn is_finished(&self) -> bool {
        self.current.is_some_and(|c| self.tree.is_leaf(c))
    }

    /// Appends `child` with the given witness.
    pub fn step_onchain(&mut self, chain: &mut ChainState, child: NodeId, w: &AppendWitness) -> Result<(), ProtocolError> {
        let current = self.current.ok_or(ProtocolError::NotStarted)?;
        if !self.children().contains(&child) {
            return Err(ProtocolError::NotAChild { current, child });
        }
        let tx = &self.instances[&child];
        chain
            .try_append(tx, w)
            .map_err(|error| ProtocolError::Append { name: tx.name.clone(), error })?;
        self.current = Some(child);
        Ok(())
    }

    /// Child realized by the transaction with this digest, if any.
    pub fn child_by_digest(&self, d: crate::witness::TxDigest) -> Option<NodeId> {
        self.children().into_iter().find(|c| self.instances[c].digest == d)
    }
}

/// Runs the contract purely on-chain with honest participants steering
/// along `path` (which must start at the root and end at a leaf).
pub fn run_onchain_baseline(
    tree: &ContractTree,
    secrets: &crate::description::SecretBook,
    path: &[NodeId],
    oracle: &RevealSchedule,
) -> Result<Trace, ProtocolError> {
    let agree: BTreeSet<String> = path
        .iter()
        .filter_map(|&id| tree.node(id))
        .filter(|n| !n.authorizers().is_empty())
        .map(|n| n.name.clone())
        .collect();
    let scenario = Scenario::honest(tree.clone(), secrets.clone(), crate::harness::Mode::Onchain, oracle.clone(), 1)
        .with_agree(&agree);
    let trace = crate::harness::run(&scenario).map_err(|e| ProtocolError::InvalidParameter(e.to_string()))?;
    let appended: Vec<&str> = trace.appends().filter(|(_, tx, _)| !tx.is_deposit()).map(|(_, tx, _)| tx.name.as_str()).collect();
    for (i, &id) in path.iter().enumerate() {
        if appended.get(i) != Some(&tree.name(id)) {
            return Err(ProtocolError::PathDiverged(tree.name(id).to_string()));
        }
    }
    if appended.len() != path.len() {
        return Err(ProtocolError::PathDiverged(appended.last().copied().unwrap_or("").to_string()));
    }
    Ok(trace)
}
