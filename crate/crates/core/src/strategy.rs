//! Participant behaviour. A strategy is a pure function from what one
//! participant can see to the next action it takes.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::contract::{NodeId, ParticipantId};
use crate::witness::TxDigest;
use crate::Height;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stipulating,
    /// Off-chain steps are being negotiated.
    Running,
    /// `Init` is on-chain and no graft root has been appended yet.
    Failsafe,
    /// The contract is advancing on-chain.
    Executing,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExchangeContext {
    Stipulation,
    Graft(usize),
}

impl fmt::Display for ExchangeContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExchangeContext::Stipulation => f.write_str("stipulation"),
            ExchangeContext::Graft(i) => write!(f, "graft {i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DueMessage {
    pub to: ParticipantId,
    pub item: String,
    /// Position among all messages this participant has sent in the run.
    pub index: usize,
    pub context: ExchangeContext,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExchangeView {
    pub context: ExchangeContext,
    pub last_activity: Height,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProposalView {
    pub child: NodeId,
    pub proposer: ParticipantId,
    pub awaiting_me: bool,
    pub accepted: bool,
    pub refused: bool,
    pub since: Height,
}

/// A child of the node the contract currently stands at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChildView {
    pub id: NodeId,
    pub name: String,
    pub reveals_public: bool,
    pub authorizers: BTreeSet<ParticipantId>,
    /// Its `After` delay (or on-chain timelock) has elapsed.
    pub ready: bool,
    pub refused: bool,
    /// On-chain only: the instance to append.
    pub digest: Option<TxDigest>,
    /// On-chain only: this participant holds every edge authorization.
    pub authorized: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraftView {
    pub index: usize,
    pub origin: NodeId,
    pub origin_is_leaf: bool,
    pub root: TxDigest,
    /// This participant holds every participant's signature on the root.
    pub held: bool,
    pub sealed: bool,
    /// Height at which the root can be appended, once `Init` is on-chain.
    pub enabled_at: Option<Height>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub me: ParticipantId,
    pub height: Height,
    pub stage: Stage,
    pub patience: u64,
    pub due: Option<DueMessage>,
    pub exchange: Option<ExchangeView>,
    pub proposal: Option<ProposalView>,
    /// Off-chain steps sealed so far.
    pub completed_steps: usize,
    pub children: Vec<ChildView>,
    /// Root (on-chain) or `Head` (off-chain) while stipulating, if this
    /// participant holds its full witness.
    pub root_witness: Option<TxDigest>,
    pub init: Option<TxDigest>,
    pub grafts: Vec<GraftView>,
}

impl Observation {
    /// Latest graft whose root this participant can append.
    pub fn latest_held(&self) -> Option<&GraftView> {
        self.grafts.iter().rev().find(|g| g.held)
    }

    fn proposal_stale(&self) -> bool {
        self.proposal
            .as_ref()
            .is_some_and(|p| !p.awaiting_me && self.height >= p.since + self.patience)
    }

    fn exchange_stale(&self) -> bool {
        self.due.is_none() && self.exchange.as_ref().is_some_and(|e| self.height >= e.last_activity + self.patience)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    SendExpectedMessage,
    Withhold,
    AppendTx(TxDigest),
    ProposeStep(NodeId),
    AgreeStep,
    RefuseStep,
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RollbackTarget {
    /// The shadow root.
    Oldest,
    /// The graft sealed just before the latest one.
    Previous,
}

/// Step indices count sealed off-chain steps: `at_step: 0` acts before or
/// during the first step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum StrategyKind {
    Honest,
    /// Withholds every message from its `at_message`-th on (and never
    /// appends the root), or every graft message from step `at_step` on.
    Staller {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        at_message: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        at_step: Option<usize>,
    },
    /// Appends `Init` at step `at_step`; with `mid_exchange`, only once that
    /// step's graft is being signed.
    PrematureInit {
        at_step: usize,
        #[serde(default)]
        mid_exchange: bool,
    },
    /// Opens `Init` after `open_after_step` steps (or waits for someone else
    /// to) and then tries to redeem it with an outdated graft.
    RollbackAttacker {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        open_after_step: Option<usize>,
        target: RollbackTarget,
    },
    /// Refuses the proposal at step `at_step` and stops cooperating.
    SilentAborter { at_step: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    #[serde(flatten)]
    pub kind: StrategyKind,
    /// `AuthBy` nodes this participant is willing to authorize.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub agree: BTreeSet<String>,
}

impl Strategy {
    pub fn honest() -> Self {
        Strategy { kind: StrategyKind::Honest, agree: BTreeSet::new() }
    }

    pub fn new(kind: StrategyKind) -> Self {
        Strategy { kind, agree: BTreeSet::new() }
    }

    pub fn with_agree(mut self, agree: &BTreeSet<String>) -> Self {
        self.agree = agree.clone();
        self
    }

    pub fn is_honest(&self) -> bool {
        self.kind == StrategyKind::Honest
    }

    pub fn decide(&self, obs: &Observation) -> Action {
        match &self.kind {
            StrategyKind::Honest => honest(obs, &self.agree),
            StrategyKind::Staller { at_message, at_step } => staller(obs, &self.agree, *at_message, *at_step),
            StrategyKind::PrematureInit { at_step, mid_exchange } => {
                premature_init(obs, &self.agree, *at_step, *mid_exchange)
            }
            StrategyKind::RollbackAttacker { open_after_step, target } => {
                rollback_attacker(obs, &self.agree, *open_after_step, *target)
            }
            StrategyKind::SilentAborter { at_step } => silent_aborter(obs, &self.agree, *at_step),
        }
    }
}

fn willing(child: &ChildView, agree: &BTreeSet<String>) -> bool {
    child.authorizers.is_empty() || agree.contains(&child.name)
}

/// First child that could be taken now.
pub fn candidate<'a>(obs: &'a Observation, agree: &BTreeSet<String>) -> Option<&'a ChildView> {
    obs.children
        .iter()
        .find(|c| !c.refused && c.reveals_public && c.ready && willing(c, agree))
}

fn answer(obs: &Observation, agree: &BTreeSet<String>, child: NodeId) -> Action {
    let ok = obs
        .children
        .iter()
        .find(|c| c.id == child)
        .is_some_and(|c| c.reveals_public && willing(c, agree) && (c.ready || obs.stage == Stage::Executing));
    if ok {
        Action::AgreeStep
    } else {
        Action::RefuseStep
    }
}

pub fn honest(obs: &Observation, agree: &BTreeSet<String>) -> Action {
    match obs.stage {
        Stage::Stipulating => {
            if obs.due.is_some() {
                Action::SendExpectedMessage
            } else if let Some(d) = obs.root_witness {
                Action::AppendTx(d)
            } else {
                Action::Idle
            }
        }
        Stage::Running => {
            if obs.due.is_some() {
                return Action::SendExpectedMessage;
            }
            if let Some(p) = obs.proposal.as_ref().filter(|p| p.awaiting_me) {
                return answer(obs, agree, p.child);
            }
            let init = obs.init.expect("init known while running");
            let refused = obs.proposal.as_ref().is_some_and(|p| p.refused);
            let at_leaf = obs.latest_held().is_some_and(|g| g.origin_is_leaf);
            if refused || obs.proposal_stale() || obs.exchange_stale() || at_leaf {
                return Action::AppendTx(init);
            }
            if obs.proposal.is_some() || obs.exchange.is_some() {
                return Action::Idle;
            }
            match candidate(obs, agree) {
                Some(c) => Action::ProposeStep(c.id),
                None => Action::Idle,
            }
        }
        Stage::Failsafe => match obs.latest_held() {
            Some(g) if g.enabled_at.is_some_and(|h| h <= obs.height) => Action::AppendTx(g.root),
            _ => Action::Idle,
        },
        Stage::Executing => {
            if let Some(p) = obs.proposal.as_ref().filter(|p| p.awaiting_me) {
                return answer(obs, agree, p.child);
            }
            let Some(c) = candidate(obs, agree) else { return Action::Idle };
            let digest = c.digest.expect("on-chain children carry digests");
            if c.authorizers.is_empty() || c.authorized {
                Action::AppendTx(digest)
            } else if obs.proposal.is_none() {
                Action::ProposeStep(c.id)
            } else {
                Action::Idle
            }
        }
        Stage::Done => Action::Idle,
    }
}

pub fn staller(obs: &Observation, agree: &BTreeSet<String>, at_message: Option<usize>, at_step: Option<usize>) -> Action {
    if let Some(m) = at_message {
        if obs.due.as_ref().is_some_and(|d| d.index >= m) {
            return Action::Withhold;
        }
        if obs.stage == Stage::Stipulating {
            return if obs.due.is_some() { Action::SendExpectedMessage } else { Action::Idle };
        }
    }
    if let Some(k) = at_step {
        if obs.stage == Stage::Running && obs.completed_steps >= k {
            return if obs.due.is_some() {
                Action::Withhold
            } else if obs.proposal.as_ref().is_some_and(|p| p.awaiting_me) {
                Action::AgreeStep
            } else {
                Action::Idle
            };
        }
    }
    honest(obs, agree)
}

pub fn premature_init(obs: &Observation, agree: &BTreeSet<String>, at_step: usize, mid_exchange: bool) -> Action {
    if obs.stage == Stage::Running && obs.completed_steps == at_step {
        let active = obs.exchange.is_some();
        if !mid_exchange || active {
            return Action::AppendTx(obs.init.expect("init known while running"));
        }
    }
    honest(obs, agree)
}

pub fn rollback_attacker(
    obs: &Observation,
    agree: &BTreeSet<String>,
    open_after_step: Option<usize>,
    target: RollbackTarget,
) -> Action {
    match obs.stage {
        Stage::Running if open_after_step == Some(obs.completed_steps) && obs.exchange.is_none() => {
            Action::AppendTx(obs.init.expect("init known while running"))
        }
        Stage::Failsafe => {
            let held: Vec<&GraftView> = obs.grafts.iter().filter(|g| g.held).collect();
            let pick = match target {
                RollbackTarget::Oldest => held.first(),
                RollbackTarget::Previous => held.len().checked_sub(2).and_then(|i| held.get(i)),
            };
            match pick.or(held.last()) {
                Some(g) => Action::AppendTx(g.root),
                None => Action::Idle,
            }
        }
        _ => honest(obs, agree),
    }
}

pub fn silent_aborter(obs: &Observation, agree: &BTreeSet<String>, at_step: usize) -> Action {
    if obs.stage == Stage::Running && obs.completed_steps >= at_step {
        return if obs.proposal.as_ref().is_some_and(|p| p.awaiting_me) {
            Action::RefuseStep
        } else if obs.due.is_some() {
            Action::Withhold
        } else {
            Action::Idle
        };
    }
    honest(obs, agree)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(stage: Stage) -> Observation {
        Observation {
            me: "A".into(),
            height: 10,
            stage,
            patience: 2,
            due: None,
            exchange: None,
            proposal: None,
            completed_steps: 0,
            children: Vec::new(),
            root_witness: None,
            init: Some(TxDigest([1; 32])),
            grafts: Vec::new(),
        }
    }

    fn graft(index: usize, held: bool, enabled_at: Option<Height>) -> GraftView {
        GraftView {
            index,
            origin: NodeId(index as u32),
            origin_is_leaf: false,
            root: TxDigest([10 + index as u8; 32]),
            held,
            sealed: held,
            enabled_at,
        }
    }

    fn child(name: &str, auth: &[&str]) -> ChildView {
        ChildView {
            id: NodeId(1),
            name: name.into(),
            reveals_public: true,
            authorizers: auth.iter().map(|&a| ParticipantId::new(a)).collect(),
            ready: true,
            refused: false,
            digest: Some(TxDigest([7; 32])),
            authorized: false,
        }
    }

    #[test]
    fn honest_fails_safe_when_counterparty_is_silent() {
        let mut o = obs(Stage::Running);
        o.exchange = Some(ExchangeView { context: ExchangeContext::Graft(1), last_activity: 8 });
        assert_eq!(honest(&o, &BTreeSet::new()), Action::AppendTx(TxDigest([1; 32])));
        o.exchange = Some(ExchangeView { context: ExchangeContext::Graft(1), last_activity: 9 });
        assert_eq!(honest(&o, &BTreeSet::new()), Action::Idle);
    }

    #[test]
    fn honest_appends_latest_graft_when_enabled() {
        let mut o = obs(Stage::Failsafe);
        o.grafts = vec![graft(0, true, Some(16)), graft(1, true, Some(12)), graft(2, false, None)];
        o.height = 11;
        assert_eq!(honest(&o, &BTreeSet::new()), Action::Idle);
        o.height = 12;
        assert_eq!(honest(&o, &BTreeSet::new()), Action::AppendTx(TxDigest([11; 32])));
    }

    #[test]
    fn honest_idles_with_nothing_to_do() {
        assert_eq!(honest(&obs(Stage::Running), &BTreeSet::new()), Action::Idle);
        assert_eq!(honest(&obs(Stage::Done), &BTreeSet::new()), Action::Idle);
    }

    #[test]
    fn honest_only_authorizes_agreed_nodes() {
        let mut o = obs(Stage::Running);
        o.children = vec![child("Out_W", &["A", "B"])];
        assert_eq!(honest(&o, &BTreeSet::new()), Action::Idle);
        let agree: BTreeSet<String> = ["Out_W".to_string()].into();
        assert_eq!(honest(&o, &agree), Action::ProposeStep(NodeId(1)));
        o.proposal = Some(ProposalView {
            child: NodeId(1),
            proposer: "B".into(),
            awaiting_me: true,
            accepted: false,
            refused: false,
            since: 10,
        });
        assert_eq!(honest(&o, &BTreeSet::new()), Action::RefuseStep);
        assert_eq!(honest(&o, &agree), Action::AgreeStep);
    }

    #[test]
    fn rollback_attacker_targets_old_grafts() {
        let mut o = obs(Stage::Failsafe);
        o.grafts = vec![graft(0, true, Some(16)), graft(1, true, Some(14)), graft(2, true, Some(12))];
        let oldest = rollback_attacker(&o, &BTreeSet::new(), None, RollbackTarget::Oldest);
        assert_eq!(oldest, Action::AppendTx(TxDigest([10; 32])));
        let prev = rollback_attacker(&o, &BTreeSet::new(), None, RollbackTarget::Previous);
        assert_eq!(prev, Action::AppendTx(TxDigest([11; 32])));
    }

    #[test]
    fn stall_index_beyond_the_run_is_honest() {
        let o = obs(Stage::Running);
        assert_eq!(staller(&o, &BTreeSet::new(), None, Some(9)), honest(&o, &BTreeSet::new()));
    }

    #[test]
    fn strategy_file_syntax() {
        let s: Strategy = serde_json::from_str(r#"{"strategy":"premature_init","at_step":2,"mid_exchange":true}"#).unwrap();
        assert_eq!(s.kind, StrategyKind::PrematureInit { at_step: 2, mid_exchange: true });
        let s: Strategy = serde_json::from_str(r#"{"strategy":"honest","agree":["Out_L"]}"#).unwrap();
        assert!(s.is_honest() && s.agree.contains("Out_L"));
    }
}
