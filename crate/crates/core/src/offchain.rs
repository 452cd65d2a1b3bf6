//! Optimistic execution. Deposits go into `Head`; `Init` spends `Head` and
//! is kept off-chain as the failsafe. Every agreed step is recorded as a
//! graft: a copy of the remaining subtree whose root spends `Init` after
//! `subtree_height(origin) * t` blocks. Later grafts unlock strictly
//! earlier, so once `Init` is public the latest fully signed graft wins.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::contract::{extract_subtree, subtree_height, validate_tree, ContractError, ContractTree, NodeId, ParticipantId};
use crate::exchange::{Exchange, Item, Message, Stores};
use crate::ledger::{AppendWitness, ChainState, TxInstance};
use crate::onchain::{contract_salt, deposit_instances, deposit_outpoints, instantiate, OnchainSession, ProtocolError};
use crate::witness::{Canonical, Reveal};
use crate::Height;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffchainCompilation {
    pub deposits: BTreeMap<ParticipantId, TxInstance>,
    pub head: TxInstance,
    pub init: TxInstance,
    /// Graft 0: the whole contract hanging off `Init`.
    pub shadow: Graft,
    pub t: u64,
    salt: [u8; 32],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraftStatus {
    PartiallySigned,
    FullySigned,
    /// Was still being signed when `Init` went on-chain.
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graft {
    pub index: usize,
    pub origin: NodeId,
    pub root: TxInstance,
    /// Copies of the origin's descendants, keyed by original node id.
    pub body: BTreeMap<NodeId, TxInstance>,
    pub status: GraftStatus,
}

impl Graft {
    pub fn rel_timelock(&self) -> u64 {
        self.root.rel_timelock
    }

    /// Root and body together, keyed by original node id.
    pub fn instances(&self) -> BTreeMap<NodeId, TxInstance> {
        let mut all = self.body.clone();
        all.insert(self.origin, self.root.clone());
        all
    }

    /// Exchange phases: the templates, body signatures in preorder, the root
    /// last.
    pub fn phases(&self, tree: &ContractTree) -> Vec<Vec<Item>> {
        let body = tree
            .preorder(self.origin)
            .into_iter()
            .filter_map(|id| self.body.get(&id))
            .map(|tx| Item::sign(&tx.name, tx.digest))
            .collect();
        vec![vec![Item::TxSet], body, vec![Item::sign(&self.root.name, self.root.digest)]]
    }
}

fn graft_salt(salt: &[u8; 32], index: usize) -> [u8; 32] {
    let mut c = Canonical::new("graftsim/graft/v1");
    c.put_bytes(salt).put_u64(index as u64);
    c.sha256()
}

/// Copies the subtree under `origin` and roots it on `init`.
pub fn compile_graft(
    tree: &ContractTree,
    salt: &[u8; 32],
    init: &TxInstance,
    t: u64,
    origin: NodeId,
    index: usize,
) -> Result<Graft, ProtocolError> {
    let frag = extract_subtree(tree, origin)?;
    let timelock = subtree_height(tree, origin)? * t;
    let fresh = instantiate(
        &frag.tree,
        &graft_salt(salt, index),
        frag.tree.root,
        vec![init.outpoint(0)],
        init.output_value(),
        timelock,
        false,
    )?;
    let mut body: BTreeMap<NodeId, TxInstance> = fresh
        .into_iter()
        .map(|(id, tx)| (frag.origin(id).expect("provenance covers fragment"), tx))
        .collect();
    let root = body.remove(&origin).expect("fragment root");
    Ok(Graft { index, origin, root, body, status: GraftStatus::PartiallySigned })
}

pub fn compile_offchain(tree: &ContractTree, t: u64) -> Result<OffchainCompilation, ProtocolError> {
    let errors = validate_tree(tree);
    if !errors.is_empty() {
        return Err(ProtocolError::InvalidTree(errors));
    }
    if t < 1 {
        return Err(ProtocolError::InvalidParameter("t must be at least 1".into()));
    }
    let salt = contract_salt(tree, "offchain");
    let deposits = deposit_instances(tree);
    let all: BTreeSet<ParticipantId> = tree.participants.clone();
    let head_value = tree
        .total_deposits()
        .checked_sub(tree.fee)
        .ok_or(ContractError::NegativeBalance(tree.root))?;
    let head = TxInstance::new(
        &salt,
        "Head",
        deposit_outpoints(&deposits),
        0,
        all.clone(),
        BTreeSet::new(),
        vec![crate::contract::OutputSpec::continuation(head_value)],
    );
    let init_value = head_value.checked_sub(tree.fee).ok_or(ContractError::NegativeBalance(tree.root))?;
    let init = TxInstance::new(
        &salt,
        "Init",
        vec![head.outpoint(0)],
        0,
        all,
        BTreeSet::new(),
        vec![crate::contract::OutputSpec::continuation(init_value)],
    );
    let shadow = compile_graft(tree, &salt, &init, t, tree.root, 0)?;
    Ok(OffchainCompilation { deposits, head, init, shadow, t, salt })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Stipulating,
    Running,
    Failsafe,
    Finalized,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffchainState {
    pub tree: ContractTree,
    pub compilation: OffchainCompilation,
    /// `grafts[0]` is the shadow copy; at most the last one is unsealed.
    pub grafts: Vec<Graft>,
    pub phase: Phase,
    pub init_on_chain: bool,
    /// Height at which the latest graft was sealed; `After` delays of the
    /// next step count from here.
    pub anchor: Height,
    cache: GraftCache,
}

/// Grafts compiled so far for one `(tree, t)`, keyed by origin and index.
/// Shared between states built from the same contract on this thread.
#[derive(Debug, Clone, Default)]
struct GraftCache(Rc<RefCell<BTreeMap<(NodeId, usize), Graft>>>);

impl PartialEq for GraftCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl Eq for GraftCache {}

struct Memo {
    tree: ContractTree,
    t: u64,
    compilation: OffchainCompilation,
    cache: GraftCache,
}

thread_local! {
    // Sweeps run the same contract many times; compiling is mostly hashing.
    static LAST: RefCell<Option<Memo>> = const { RefCell::new(None) };
}

impl OffchainState {
    pub fn new(tree: &ContractTree, t: u64) -> Result<Self, ProtocolError> {
        let hit = LAST.with_borrow(|m| {
            m.as_ref().filter(|m| m.t == t && m.tree == *tree).map(|m| (m.compilation.clone(), m.cache.clone()))
        });
        let (compilation, cache) = match hit {
            Some(h) => h,
            None => {
                let compilation = compile_offchain(tree, t)?;
                let cache = GraftCache::default();
                LAST.set(Some(Memo { tree: tree.clone(), t, compilation: compilation.clone(), cache: cache.clone() }));
                (compilation, cache)
            }
        };
        Ok(OffchainState {
            tree: tree.clone(),
            grafts: vec![compilation.shadow.clone()],
            compilation,
            phase: Phase::Stipulating,
            init_on_chain: false,
            anchor: 0,
            cache,
        })
    }

    /// Templates, then `Init` and the shadow copy in preorder, then `Head`.
    pub fn stipulation_phases(&self) -> Vec<Vec<Item>> {
        let shadow = &self.compilation.shadow;
        let init = &self.compilation.init;
        let instances = shadow.instances();
        let mut middle = vec![Item::sign(&init.name, init.digest)];
        middle.extend(self.tree.preorder(self.tree.root).into_iter().map(|id| {
            let tx = &instances[&id];
            Item::sign(&tx.name, tx.digest)
        }));
        let head = &self.compilation.head;
        vec![vec![Item::TxSet], middle, vec![Item::sign(&head.name, head.digest)]]
    }

    pub fn stipulation_exchange(&self, started: Height) -> Exchange {
        Exchange::new(&self.tree.participants, self.stipulation_phases(), started)
    }

    /// Called once `Head` is on-chain.
    pub fn start(&mut self, height: Height) {
        self.grafts[0].status = GraftStatus::FullySigned;
        self.phase = Phase::Running;
        self.anchor = height;
    }

    /// Runs the stipulation exchange and appends `Head` (but not `Init`).
    pub fn stipulate_offchain(
        &mut self,
        chain: &mut ChainState,
        stores: &mut Stores,
        withhold: impl FnMut(&Message) -> bool,
    ) -> Result<Vec<Message>, ProtocolError> {
        if self.phase != Phase::Stipulating {
            return Err(ProtocolError::AlreadyStarted);
        }
        let mut ex = self.stipulation_exchange(chain.height);
        ex.sign_own(stores);
        let sent = ex.run(stores, chain.height, withhold).map_err(|(p, _)| ProtocolError::StipulationAborted(p))?;
        let first = self.tree.participants.iter().next().expect("nonempty participants");
        let head = self.compilation.head.clone();
        let w = AppendWitness::assemble(&head, &stores[first], |_| None);
        chain
            .try_append(&head, &w)
            .map_err(|error| ProtocolError::Append { name: head.name.clone(), error })?;
        self.start(chain.height);
        Ok(sent)
    }

    pub fn latest_sealed(&self) -> &Graft {
        self.grafts
            .iter()
            .rev()
            .find(|g| g.status == GraftStatus::FullySigned)
            .expect("shadow graft is sealed once running")
    }

    /// Graft currently being signed, if any.
    pub fn pending(&self) -> Option<&Graft> {
        self.grafts.last().filter(|g| g.status == GraftStatus::PartiallySigned && self.phase != Phase::Stipulating)
    }

    /// Node the next off-chain step starts from.
    pub fn head_origin(&self) -> NodeId {
        self.latest_sealed().origin
    }

    /// Checks that `child` may be grafted now: it must be a child of the
    /// current head, its secrets must be public, its `AuthBy` signers must
    /// have agreed and its `After` delay must have elapsed since the last
    /// step.
    pub fn check_step(
        &self,
        child: NodeId,
        reveals: &BTreeMap<String, Reveal>,
        agreed: &BTreeSet<ParticipantId>,
        height: Height,
    ) -> Result<(), ProtocolError> {
        let current = self.head_origin();
        let parent = self.tree.get(current)?;
        if !parent.children.contains(&child) {
            return Err(ProtocolError::NotAChild { current, child });
        }
        let node = self.tree.get(child)?;
        for c in node.reveals() {
            if !reveals.get(&c.label).is_some_and(|r| &r.commitment == c) {
                return Err(ProtocolError::RequirementUnmet(format!("reveal {}", c.label)));
            }
        }
        if let Some(p) = node.authorizers().iter().find(|p| !agreed.contains(*p)) {
            return Err(ProtocolError::RequirementUnmet(format!("authorization by {p}")));
        }
        if height < self.anchor + node.delay() {
            return Err(ProtocolError::RequirementUnmet(format!("wait until {}", self.anchor + node.delay())));
        }
        Ok(())
    }

    /// Creates the next graft (partially signed) for `child`.
    pub fn begin_graft(&mut self, child: NodeId) -> Result<&Graft, ProtocolError> {
        if self.phase != Phase::Running {
            return Err(ProtocolError::RequirementUnmet(format!("phase is {:?}", self.phase)));
        }
        if self.pending().is_some() {
            return Err(ProtocolError::RequirementUnmet("a graft is still being signed".into()));
        }
        let key = (child, self.grafts.len());
        let cached = self.cache.0.borrow().get(&key).cloned();
        let g = match cached {
            Some(g) => g,
            None => {
                let g = compile_graft(
                    &self.tree,
                    &self.compilation.salt,
                    &self.compilation.init,
                    self.compilation.t,
                    child,
                    key.1,
                )?;
                self.cache.0.borrow_mut().insert(key, g.clone());
                g
            }
        };
        self.grafts.push(g);
        Ok(self.grafts.last().expect("just pushed"))
    }

    pub fn seal_latest(&mut self, height: Height) {
        if let Some(g) = self.grafts.last_mut() {
            g.status = GraftStatus::FullySigned;
        }
        self.anchor = height;
    }

    /// One complete off-chain step: check, graft, exchange all signatures
    /// (root last). On interruption the graft stays partially signed.
    #[allow(clippy::too_many_arguments)]
    pub fn offchain_step(
        &mut self,
        child: NodeId,
        reveals: &BTreeMap<String, Reveal>,
        agreed: &BTreeSet<ParticipantId>,
        height: Height,
        stores: &mut Stores,
        withhold: impl FnMut(&Message) -> bool,
    ) -> Result<Vec<Message>, ProtocolError> {
        if self.phase != Phase::Running {
            return Err(ProtocolError::RequirementUnmet(format!("phase is {:?}", self.phase)));
        }
        self.check_step(child, reveals, agreed, height)?;
        self.begin_graft(child)?;
        let phases = self.grafts.last().expect("just begun").phases(&self.tree);
        let mut ex = Exchange::new(&self.tree.participants, phases, height);
        ex.sign_own(stores);
        let sent = ex.run(stores, height, withhold).map_err(|(p, _)| ProtocolError::Interrupted(p))?;
        self.seal_latest(height);
        Ok(sent)
    }

    /// Appends `Init` (if needed) using `store`, stops grafting and
    /// discards a partially signed graft. Returns whether `Init` was newly
    /// appended.
    pub fn trigger_failsafe(&mut self, chain: &mut ChainState, store: &crate::witness::SignatureStore) -> Result<bool, ProtocolError> {
        if !matches!(self.phase, Phase::Running | Phase::Failsafe) {
            return Err(ProtocolError::RequirementUnmet(format!("phase is {:?}", self.phase)));
        }
        let mut appended = false;
        if !self.init_on_chain {
            let init = &self.compilation.init;
            let w = AppendWitness::assemble(init, store, |_| None);
            chain
                .try_append(init, &w)
                .map_err(|error| ProtocolError::Append { name: init.name.clone(), error })?;
            self.init_on_chain = true;
            appended = true;
        }
        self.mark_failsafe();
        Ok(appended)
    }

    /// Records that `Init` is on-chain (by whoever appended it).
    pub fn mark_failsafe(&mut self) {
        self.init_on_chain = true;
        self.phase = Phase::Failsafe;
        for g in &mut self.grafts {
            if g.status == GraftStatus::PartiallySigned {
                g.status = GraftStatus::Discarded;
            }
        }
    }

    /// Appends the root of the latest sealed graft once its timelock has
    /// expired. Returns the graft index and, unless its origin is a leaf,
    /// the on-chain session that continues from it.
    pub fn finalize(
        &mut self,
        chain: &mut ChainState,
        store: &crate::witness::SignatureStore,
    ) -> Result<(usize, Option<OnchainSession>), ProtocolError> {
        if !self.init_on_chain {
            return Err(ProtocolError::RequirementUnmet("Init is not on-chain".into()));
        }
        let g = self.latest_sealed().clone();
        let w = AppendWitness::assemble(&g.root, store, |_| None);
        chain
            .try_append(&g.root, &w)
            .map_err(|error| ProtocolError::Append { name: g.root.name.clone(), error })?;
        Ok((g.index, self.continuation(g.index)))
    }

    /// On-chain session continuing from graft `index`, or `None` (and the
    /// state finalized) if the graft is a leaf.
    pub fn continuation(&mut self, index: usize) -> Option<OnchainSession> {
        let g = &self.grafts[index];
        if self.tree.is_leaf(g.origin) {
            self.phase = Phase::Finalized;
            None
        } else {
            Some(OnchainSession::from_graft(&self.tree, g.instances(), g.origin))
        }
    }
}
