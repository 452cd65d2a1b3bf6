use std::collections::{BTreeMap, BTreeSet};

use crate::contract::{ContractTree, NodeId, ParticipantId};
use crate::exchange::{Exchange, Item, Proposal, Stores};
use crate::ledger::{AppendWitness, ChainState, TxInstance};
use crate::offchain::{GraftStatus, OffchainState};
use crate::onchain::{fund, OnchainSession};
use crate::strategy::{
    Action, ChildView, Strategy, DueMessage, ExchangeContext, ExchangeView, GraftView, Observation, ProposalView, Stage,
};
use crate::trace::{EventKind, Outcome, Summary, Trace, HARNESS, ORACLE_ACTOR};
use crate::witness::{auth_digest, sign, Reveal, SecretOwner, TxDigest};
use crate::Height;

use super::{Mode, Scenario, ScenarioError};

/// Upper bound on actions within one height; only reachable through a bug.
const ACTIONS_PER_HEIGHT: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Root,
    Head,
    Init,
    GraftRoot(usize),
    Node(NodeId),
}

pub(super) struct Engine<'a> {
    sc: &'a Scenario,
    tree: &'a ContractTree,
    order: Vec<ParticipantId>,
    chain: ChainState,
    stores: Stores,
    trace: Trace,
    public: BTreeMap<String, Reveal>,
    delivered: usize,
    stage: Stage,
    offchain: Option<OffchainState>,
    session: Option<OnchainSession>,
    exchange: Option<(Exchange, ExchangeContext)>,
    proposal: Option<Proposal>,
    sent: BTreeMap<ParticipantId, usize>,
    /// Failed appends and invalid actions already logged at this height.
    failed: BTreeSet<(ParticipantId, String)>,
    withheld: BTreeSet<(ParticipantId, usize)>,
    first_withholder: Option<ParticipantId>,
    init_height: Option<Height>,
    latest_sealed_at_init: Option<usize>,
    init_redeemer: Option<usize>,
    completion: Option<Height>,
    outcome: Option<Outcome>,
    last_progress: Height,
}

impl<'a> Engine<'a> {
    pub(super) fn new(sc: &'a Scenario) -> Result<Self, ScenarioError> {
        let tree = &sc.contract;
        let mut chain = ChainState::new(tree.fee);
        let mut trace = Trace::default();
        trace.events.reserve(64);
        trace.push(
            0,
            HARNESS,
            EventKind::Start {
                mode: sc.mode.to_string(),
                fee: tree.fee,
                t: sc.t,
                participants: tree.participants.iter().map(ToString::to_string).collect(),
            },
        );
        let (session, offchain, deposits, exchange) = match sc.mode {
            Mode::Onchain => {
                let (s, comp) = OnchainSession::new(tree)?;
                let ex = s.stipulation_exchange(0);
                (Some(s), None, comp.deposits, ex)
            }
            Mode::Offchain => {
                let o = OffchainState::new(tree, sc.t)?;
                let ex = o.stipulation_exchange(0);
                let deposits = o.compilation.deposits.clone();
                (None, Some(o), deposits, ex)
            }
        };
        fund(&mut chain, &deposits)?;
        for (p, d) in &deposits {
            trace.push(0, p.as_str(), append_event(d, &AppendWitness::default(), None));
        }
        let mut stores: Stores = tree.participants.iter().map(|p| (p.clone(), Default::default())).collect();
        exchange.sign_own(&mut stores);
        Ok(Engine {
            sc,
            tree,
            order: sc.participant_order(),
            chain,
            stores,
            trace,
            public: BTreeMap::new(),
            delivered: 0,
            stage: Stage::Stipulating,
            offchain,
            session,
            exchange: Some((exchange, ExchangeContext::Stipulation)),
            proposal: None,
            sent: tree.participants.iter().map(|p| (p.clone(), 0)).collect(),
            failed: BTreeSet::new(),
            withheld: BTreeSet::new(),
            first_withholder: None,
            init_height: None,
            latest_sealed_at_init: None,
            init_redeemer: None,
            completion: None,
            outcome: None,
            last_progress: 0,
        })
    }

    pub(super) fn run(mut self) -> (Trace, ChainState) {
        let cap = self.sc.height_cap();
        loop {
            self.deliver_reveals();
            self.expire_proposal();
            self.round();
            if self.outcome.is_some() {
                break;
            }
            let h = self.chain.height;
            if self.stage == Stage::Stipulating && h >= self.last_progress + self.sc.patience {
                let who = self.first_withholder.clone().map(|p| p.to_string()).unwrap_or_default();
                self.push(HARNESS, EventKind::StipulationAborted { withholder: who.clone() });
                self.outcome = Some(Outcome::StipulationAborted { withholder: who });
                break;
            }
            if h >= cap {
                self.outcome = Some(Outcome::HeightCapExceeded);
                break;
            }
            self.chain.tick();
            self.failed.clear();
        }
        self.finish()
    }

    fn finish(mut self) -> (Trace, ChainState) {
        let summary = Summary {
            outcome: self.outcome.take().expect("terminal outcome"),
            final_height: self.chain.height,
            completion_height: self.completion,
            onchain_txs: self.chain.history().filter(|(tx, _)| !tx.is_deposit()).map(|(tx, _)| tx.name.clone()).collect(),
            init_redeemer: self.init_redeemer,
            latest_sealed_at_init: self.latest_sealed_at_init,
            payouts: self.chain.payouts().into_iter().map(|(p, v)| (p.to_string(), v)).collect(),
        };
        self.trace.summary = Some(summary);
        (self.trace, self.chain)
    }

    fn push(&mut self, actor: &str, kind: EventKind) {
        self.trace.push(self.chain.height, actor, kind);
    }

    fn deliver_reveals(&mut self) {
        let h = self.chain.height;
        while let Some(r) = self.sc.oracle.0.get(self.delivered).filter(|r| r.height <= h) {
            self.delivered += 1;
            let Some(reveal) = self.sc.secrets.reveal(&r.reveal) else { continue };
            let actor = match &reveal.commitment.owner {
                SecretOwner::External => ORACLE_ACTOR.to_string(),
                SecretOwner::Participant(p) => p.to_string(),
            };
            let label = r.reveal.clone();
            if self.public.insert(label.clone(), reveal).is_none() {
                self.push(&actor, EventKind::OracleReveal { label });
            }
        }
    }

    /// On-chain authorization requests lapse after `patience` blocks.
    fn expire_proposal(&mut self) {
        if self.stage != Stage::Executing {
            return;
        }
        let h = self.chain.height;
        let Some(p) = self.proposal.as_ref() else { return };
        if p.is_accepted() || h < p.since + self.sc.patience {
            return;
        }
        let child = p.child;
        self.proposal = None;
        if let Some(s) = self.session.as_mut() {
            s.refused.insert(child);
        }
        let name = self.tree.name(child).to_string();
        self.push(HARNESS, EventKind::StepRejected { child: name, reason: "authorization timed out".into() });
    }

    fn round(&mut self) {
        let mut actions = 0;
        loop {
            let mut progressed = false;
            for p in self.order.clone() {
                let honest = Strategy::honest();
                let strategy = self.sc.strategies.get(&p).unwrap_or(&honest);
                loop {
                    if self.outcome.is_some() {
                        return;
                    }
                    let obs = self.observe(&p);
                    let action = strategy.decide(&obs);
                    if !self.execute(&p, action) {
                        break;
                    }
                    progressed = true;
                    self.last_progress = self.chain.height;
                    actions += 1;
                    if actions > ACTIONS_PER_HEIGHT {
                        self.outcome = Some(Outcome::HeightCapExceeded);
                        return;
                    }
                }
            }
            if !progressed {
                return;
            }
        }
    }

    fn completed_steps(&self) -> usize {
        self.offchain
            .as_ref()
            .and_then(|o| o.grafts.iter().rev().find(|g| g.status == GraftStatus::FullySigned))
            .map(|g| g.index)
            .unwrap_or(0)
    }

    fn reveals_public(&self, id: NodeId) -> bool {
        self.tree
            .node(id)
            .is_some_and(|n| n.reveals().all(|c| self.public.get(&c.label).is_some_and(|r| &r.commitment == c)))
    }

    fn root_tx(&self) -> Option<&TxInstance> {
        match (&self.session, &self.offchain) {
            (_, Some(o)) => Some(&o.compilation.head),
            (Some(s), None) => Some(s.root_instance()),
            _ => None,
        }
    }

    fn observe(&self, p: &ParticipantId) -> Observation {
        let h = self.chain.height;
        let store = &self.stores[p];
        let due = self.exchange.as_ref().and_then(|(ex, ctx)| {
            ex.due(p).map(|m| DueMessage {
                to: m.to,
                item: m.item.label().to_string(),
                index: self.sent[p],
                context: *ctx,
            })
        });
        let exchange = self
            .exchange
            .as_ref()
            .map(|(ex, ctx)| ExchangeView { context: *ctx, last_activity: ex.last_activity() });
        let proposal = self.proposal.as_ref().map(|pr| ProposalView {
            child: pr.child,
            proposer: pr.proposer.clone(),
            awaiting_me: pr.awaiting(p),
            accepted: pr.is_accepted(),
            refused: pr.refused_by.is_some(),
            since: pr.since,
        });

        let mut children = Vec::new();
        match self.stage {
            Stage::Running => {
                let o = self.offchain.as_ref().expect("off-chain state");
                for &c in &self.tree.get(o.head_origin()).expect("head node").children {
                    let n = self.tree.get(c).expect("child node");
                    children.push(ChildView {
                        id: c,
                        name: n.name.clone(),
                        reveals_public: self.reveals_public(c),
                        authorizers: n.authorizers(),
                        ready: h >= o.anchor + n.delay(),
                        refused: false,
                        digest: None,
                        authorized: false,
                    });
                }
            }
            Stage::Executing => {
                let s = self.session.as_ref().expect("on-chain session");
                for c in s.children() {
                    let tx = &s.instances[&c];
                    let auth = auth_digest(tx.digest);
                    children.push(ChildView {
                        id: c,
                        name: tx.name.clone(),
                        reveals_public: self.reveals_public(c),
                        authorizers: tx.edge_signers.clone(),
                        ready: self.chain.enabled_at(tx).is_ok_and(|e| e <= h),
                        refused: s.refused.contains(&c),
                        digest: Some(tx.digest),
                        authorized: tx.edge_signers.iter().all(|q| store.contains(q, auth)),
                    });
                }
            }
            _ => {}
        }

        let root_witness = match self.stage {
            Stage::Stipulating => self
                .root_tx()
                .filter(|tx| store.holds_all(tx.digest, &tx.required_signers))
                .map(|tx| tx.digest),
            _ => None,
        };

        let grafts = self
            .offchain
            .as_ref()
            .map(|o| {
                o.grafts
                    .iter()
                    .map(|g| GraftView {
                        index: g.index,
                        origin: g.origin,
                        origin_is_leaf: self.tree.is_leaf(g.origin),
                        root: g.root.digest,
                        held: store.holds_all(g.root.digest, &g.root.required_signers),
                        sealed: g.status == GraftStatus::FullySigned,
                        enabled_at: self.init_height.map(|i| i + g.rel_timelock()),
                    })
                    .collect()
            })
            .unwrap_or_default();

        Observation {
            me: p.clone(),
            height: h,
            stage: self.stage,
            patience: self.sc.patience,
            due,
            exchange,
            proposal,
            completed_steps: self.completed_steps(),
            children,
            root_witness,
            init: self.offchain.as_ref().map(|o| o.compilation.init.digest),
            grafts,
        }
    }

    /// Carries out one action; returns whether anything changed.
    fn execute(&mut self, p: &ParticipantId, action: Action) -> bool {
        match action {
            Action::Idle => false,
            Action::SendExpectedMessage => self.send(p),
            Action::Withhold => {
                self.withhold(p);
                false
            }
            Action::AppendTx(d) => self.append(p, d),
            Action::ProposeStep(c) => self.propose(p, c),
            Action::AgreeStep => self.agree(p),
            Action::RefuseStep => self.refuse(p),
        }
    }

    fn invalid(&mut self, p: &ParticipantId, reason: &str) -> bool {
        if self.failed.insert((p.clone(), reason.to_string())) {
            self.push(p.as_str(), EventKind::InvalidAction { reason: reason.to_string() });
        }
        false
    }

    fn send(&mut self, p: &ParticipantId) -> bool {
        let h = self.chain.height;
        let Some((ex, ctx)) = self.exchange.as_mut() else { return self.invalid(p, "no exchange in progress") };
        let ctx = *ctx;
        let Some(m) = ex.send(p, &mut self.stores, h) else { return self.invalid(p, "no message due") };
        let complete = ex.is_complete();
        *self.sent.get_mut(p).expect("participant") += 1;
        let context = ctx.to_string();
        let kind = match m.item {
            Item::TxSet => EventKind::TxSetSent { to: m.to.to_string(), context },
            Item::Sign { name, digest } => EventKind::SignatureSent { to: m.to.to_string(), tx: name, digest, context },
        };
        self.push(p.as_str(), kind);
        if complete {
            self.exchange_done(ctx);
        }
        true
    }

    fn withhold(&mut self, p: &ParticipantId) {
        let Some((ex, ctx)) = self.exchange.as_ref() else { return };
        let Some(m) = ex.due(p) else { return };
        let index = self.sent[p];
        if self.withheld.insert((p.clone(), index)) {
            let kind = EventKind::Withheld { to: m.to.to_string(), item: m.item.label().to_string(), context: ctx.to_string() };
            self.first_withholder.get_or_insert_with(|| p.clone());
            self.push(p.as_str(), kind);
        }
    }

    fn exchange_done(&mut self, ctx: ExchangeContext) {
        self.exchange = None;
        if let ExchangeContext::Graft(index) = ctx {
            let h = self.chain.height;
            let o = self.offchain.as_mut().expect("off-chain state");
            o.seal_latest(h);
            let origin = self.tree.name(o.grafts[index].origin).to_string();
            self.push(HARNESS, EventKind::GraftSealed { index, origin });
        }
    }

    fn lookup(&self, d: TxDigest) -> Option<(TxInstance, Role)> {
        if let Some(o) = &self.offchain {
            if o.compilation.head.digest == d {
                return Some((o.compilation.head.clone(), Role::Head));
            }
            if o.compilation.init.digest == d {
                return Some((o.compilation.init.clone(), Role::Init));
            }
            if let Some(g) = o.grafts.iter().find(|g| g.root.digest == d) {
                return Some((g.root.clone(), Role::GraftRoot(g.index)));
            }
        }
        let s = self.session.as_ref()?;
        let (&id, tx) = s.instances.iter().find(|(_, tx)| tx.digest == d)?;
        let role = if self.offchain.is_none() && id == self.tree.root { Role::Root } else { Role::Node(id) };
        Some((tx.clone(), role))
    }

    fn append(&mut self, p: &ParticipantId, d: TxDigest) -> bool {
        let Some((tx, role)) = self.lookup(d) else { return self.invalid(p, "unknown transaction") };
        let public = &self.public;
        let w = AppendWitness::assemble(&tx, &self.stores[p], |l| public.get(l));
        match self.chain.try_append(&tx, &w) {
            Ok(()) => {
                self.push(p.as_str(), append_event(&tx, &w, None));
                self.on_append(p, role);
                true
            }
            Err(e) => {
                if self.failed.insert((p.clone(), d.to_hex())) {
                    self.push(p.as_str(), append_event(&tx, &w, Some(e)));
                }
                false
            }
        }
    }

    fn on_append(&mut self, p: &ParticipantId, role: Role) {
        let h = self.chain.height;
        match role {
            Role::Root => {
                self.exchange = None;
                let s = self.session.as_mut().expect("on-chain session");
                s.current = Some(self.tree.root);
                self.stage = Stage::Executing;
                self.reached(self.tree.root);
            }
            Role::Head => {
                self.exchange = None;
                let o = self.offchain.as_mut().expect("off-chain state");
                o.start(h);
                self.stage = Stage::Running;
                let origin = self.tree.name(self.tree.root).to_string();
                self.push(HARNESS, EventKind::GraftSealed { index: 0, origin });
            }
            Role::Init => {
                self.push(p.as_str(), EventKind::FailsafeTriggered);
                self.push(p.as_str(), EventKind::InitAppended);
                self.latest_sealed_at_init = Some(self.completed_steps());
                self.init_height = Some(h);
                self.offchain.as_mut().expect("off-chain state").mark_failsafe();
                self.exchange = None;
                self.proposal = None;
                self.stage = Stage::Failsafe;
            }
            Role::GraftRoot(index) => {
                let o = self.offchain.as_mut().expect("off-chain state");
                let origin = o.grafts[index].origin;
                let next = o.continuation(index);
                self.init_redeemer = Some(index);
                let name = self.tree.name(origin).to_string();
                self.push(p.as_str(), EventKind::GraftAppended { index, origin: name });
                self.session = next;
                self.stage = Stage::Executing;
                self.reached(origin);
            }
            Role::Node(id) => {
                self.session.as_mut().expect("on-chain session").current = Some(id);
                self.proposal = None;
                self.reached(id);
            }
        }
    }

    fn reached(&mut self, id: NodeId) {
        if self.tree.is_leaf(id) {
            let leaf = self.tree.name(id).to_string();
            self.push(HARNESS, EventKind::Finalized { leaf: leaf.clone() });
            self.completion = Some(self.chain.height);
            self.outcome = Some(Outcome::Finalized { leaf });
            self.stage = Stage::Done;
        }
    }

    fn propose(&mut self, p: &ParticipantId, child: NodeId) -> bool {
        if self.proposal.is_some() || self.exchange.is_some() {
            return self.invalid(p, "a step is already under way");
        }
        let h = self.chain.height;
        let required = match self.stage {
            Stage::Running => {
                let o = self.offchain.as_ref().expect("off-chain state");
                if let Err(e) = o.check_step(child, &self.public, &self.tree.participants, h) {
                    return self.invalid(p, &e.to_string());
                }
                self.tree.participants.clone()
            }
            Stage::Executing => {
                let s = self.session.as_ref().expect("on-chain session");
                let Some(tx) = s.children().contains(&child).then(|| &s.instances[&child]) else {
                    return self.invalid(p, "not a child of the current node");
                };
                if tx.edge_signers.is_empty() || s.refused.contains(&child) {
                    return self.invalid(p, "step needs no authorization");
                }
                tx.edge_signers.clone()
            }
            _ => return self.invalid(p, "no step can be proposed now"),
        };
        let proposal = Proposal::new(child, p.clone(), required, h);
        let name = self.tree.name(child).to_string();
        self.push(p.as_str(), EventKind::StepProposed { child: name, step: self.completed_steps() });
        if proposal.agreed.contains(p) {
            self.authorize(p, &proposal);
        }
        let accepted = proposal.is_accepted();
        self.proposal = Some(proposal);
        if accepted {
            self.accepted();
        }
        true
    }

    /// On-chain, agreeing means handing the proposer an edge signature.
    fn authorize(&mut self, p: &ParticipantId, proposal: &Proposal) {
        if self.stage != Stage::Executing {
            return;
        }
        let s = self.session.as_ref().expect("on-chain session");
        let sig = sign(p, auth_digest(s.instances[&proposal.child].digest));
        for q in [p, &proposal.proposer] {
            self.stores.get_mut(q).expect("participant").record(&sig);
        }
    }

    fn agree(&mut self, p: &ParticipantId) -> bool {
        let Some(mut proposal) = self.proposal.take().filter(|pr| pr.awaiting(p)) else {
            return self.invalid(p, "no proposal awaits this participant");
        };
        proposal.agreed.insert(p.clone());
        let name = self.tree.name(proposal.child).to_string();
        self.push(p.as_str(), EventKind::StepAgreed { child: name });
        self.authorize(p, &proposal);
        let accepted = proposal.is_accepted();
        self.proposal = Some(proposal);
        if accepted {
            self.accepted();
        }
        true
    }

    fn refuse(&mut self, p: &ParticipantId) -> bool {
        let Some(mut proposal) = self.proposal.take().filter(|pr| pr.awaiting(p)) else {
            return self.invalid(p, "no proposal awaits this participant");
        };
        proposal.refused_by = Some(p.clone());
        let name = self.tree.name(proposal.child).to_string();
        self.push(p.as_str(), EventKind::StepRefused { child: name });
        if self.stage == Stage::Executing {
            self.session.as_mut().expect("on-chain session").refused.insert(proposal.child);
        } else {
            self.proposal = Some(proposal);
        }
        true
    }

    fn accepted(&mut self) {
        if self.stage != Stage::Running {
            return;
        }
        let h = self.chain.height;
        let child = self.proposal.take().expect("accepted proposal").child;
        let o = self.offchain.as_mut().expect("off-chain state");
        let g = o.begin_graft(child).expect("checked step");
        let (index, rel_timelock) = (g.index, g.rel_timelock());
        let ex = Exchange::new(&self.tree.participants, g.phases(self.tree), h);
        ex.sign_own(&mut self.stores);
        let origin = self.tree.name(child).to_string();
        self.push(HARNESS, EventKind::GraftProposed { index, origin, rel_timelock });
        let ctx = ExchangeContext::Graft(index);
        if ex.is_complete() {
            self.exchange_done(ctx);
        } else {
            self.exchange = Some((ex, ctx));
        }
    }
}

fn append_event(tx: &TxInstance, w: &AppendWitness, error: Option<crate::ledger::AppendError>) -> EventKind {
    EventKind::Append {
        name: tx.name.clone(),
        digest: tx.digest,
        inputs: tx.inputs.clone(),
        signers: w.signer_names(),
        reveals: w.reveal_labels(),
        error,
        tx: tx.clone(),
        witness: w.clone(),
    }
}
