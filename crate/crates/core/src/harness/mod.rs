//! Block-stepped scheduler. Each height the oracle publishes its scheduled
//! secrets, then participants are polled in a fixed order (each one until it
//! has nothing more to do) in repeated passes until a whole pass changes
//! nothing, then a block is mined.

mod engine;
mod report;
mod scenario;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::{subtree_height, validate_tree, ContractTree, ParticipantId, StructuralError};
use crate::description::{DescriptionError, SecretBook};
use crate::onchain::ProtocolError;
use crate::ledger::ChainState;
use crate::strategy::Strategy;
use crate::trace::Trace;
use crate::Height;

pub use report::{compare, Report};
pub use scenario::{load_scenario, ContractRef, ScenarioFile};

pub use crate::trace::message_census;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Onchain,
    Offchain,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Onchain => "onchain",
            Mode::Offchain => "offchain",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledReveal {
    pub height: Height,
    pub reveal: String,
}

/// Secrets the oracle (or their owners) publish, by height.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RevealSchedule(pub Vec<ScheduledReveal>);

impl RevealSchedule {
    pub fn new(entries: &[(Height, &str)]) -> Self {
        RevealSchedule(entries.iter().map(|&(height, l)| ScheduledReveal { height, reveal: l.to_string() }).collect())
    }

    pub fn last_height(&self) -> Height {
        self.0.iter().map(|r| r.height).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error(transparent)]
    Description(#[from] DescriptionError),
    #[error("invalid contract: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))]
    InvalidContract(Vec<StructuralError>),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("oracle schedule names unknown secret {0}")]
    UnknownSecret(String),
    #[error("oracle schedule heights decrease at {0}")]
    UnsortedSchedule(String),
    #[error("strategy given for unknown participant {0}")]
    UnknownParticipant(String),
    #[error("scheduling order must list every participant exactly once")]
    BadOrder,
    #[error("t must be at least 1")]
    ZeroT,
    #[error("scenarios differ in {0}")]
    IncomparableScenarios(String),
}

impl ScenarioError {
    /// True for errors in the contract itself rather than in reading files.
    pub fn is_validation(&self) -> bool {
        matches!(self, ScenarioError::InvalidContract(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub contract: ContractTree,
    pub secrets: SecretBook,
    pub mode: Mode,
    pub strategies: BTreeMap<ParticipantId, Strategy>,
    pub oracle: RevealSchedule,
    pub t: u64,
    pub patience: u64,
    pub seed: u64,
    /// Polling order within a height; lexicographic if `None`.
    pub order: Option<Vec<ParticipantId>>,
}

pub const DEFAULT_PATIENCE: u64 = 2;

impl Scenario {
    /// Every participant honest, patience 2.
    pub fn honest(contract: ContractTree, secrets: SecretBook, mode: Mode, oracle: RevealSchedule, t: u64) -> Self {
        let strategies = contract.participants.iter().map(|p| (p.clone(), Strategy::honest())).collect();
        Scenario {
            name: String::new(),
            contract,
            secrets,
            mode,
            strategies,
            oracle,
            t,
            patience: DEFAULT_PATIENCE,
            seed: 0,
            order: None,
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    /// Sets the same agree list for every participant.
    pub fn with_agree(mut self, agree: &BTreeSet<String>) -> Self {
        for s in self.strategies.values_mut() {
            s.agree = agree.clone();
        }
        self
    }

    /// Replaces one participant's behaviour, keeping its agree list.
    pub fn with_strategy(mut self, p: &str, strategy: Strategy) -> Self {
        let p = ParticipantId::new(p);
        let agree = self.strategies.get(&p).map(|s| s.agree.clone()).unwrap_or_default();
        let mut strategy = strategy;
        if strategy.agree.is_empty() {
            strategy.agree = agree;
        }
        self.strategies.insert(p, strategy);
        self
    }

    pub fn with_order(mut self, order: Vec<ParticipantId>) -> Self {
        self.order = Some(order);
        self
    }

    pub fn with_patience(mut self, patience: u64) -> Self {
        self.patience = patience;
        self
    }

    pub fn participant_order(&self) -> Vec<ParticipantId> {
        self.order.clone().unwrap_or_else(|| self.contract.participants.iter().cloned().collect())
    }

    pub fn honest_count(&self) -> usize {
        self.contract
            .participants
            .iter()
            .filter(|p| self.strategies.get(*p).is_none_or(Strategy::is_honest))
            .count()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let errors = validate_tree(&self.contract);
        if !errors.is_empty() {
            return Err(ScenarioError::InvalidContract(errors));
        }
        if self.t < 1 {
            return Err(ScenarioError::ZeroT);
        }
        let mut last = 0;
        for r in &self.oracle.0 {
            if self.secrets.commitment(&r.reveal).is_none() {
                return Err(ScenarioError::UnknownSecret(r.reveal.clone()));
            }
            if r.height < last {
                return Err(ScenarioError::UnsortedSchedule(r.reveal.clone()));
            }
            last = r.height;
        }
        if let Some(p) = self.strategies.keys().find(|p| !self.contract.participants.contains(*p)) {
            return Err(ScenarioError::UnknownParticipant(p.to_string()));
        }
        if let Some(order) = &self.order {
            let set: BTreeSet<&ParticipantId> = order.iter().collect();
            if order.len() != self.contract.participants.len() || set.len() != order.len()
                || !set.iter().all(|p| self.contract.participants.contains(*p))
            {
                return Err(ScenarioError::BadOrder);
            }
        }
        Ok(())
    }

    /// Heights after which a run is declared stuck: ten times a bound on
    /// the slowest honest completion.
    pub fn height_cap(&self) -> Height {
        let tree = &self.contract;
        let depth = subtree_height(tree, tree.root).unwrap_or(0);
        let delays: u64 = tree.nodes.iter().map(|n| n.delay()).sum();
        let nodes = tree.nodes.len() as u64;
        10 * (1 + self.oracle.last_height() + delays + self.patience * (nodes + 2) + depth * self.t + depth + 2)
    }
}

/// Runs a scenario to a terminal outcome.
pub fn run(scenario: &Scenario) -> Result<Trace, ScenarioError> {
    run_with_ledger(scenario).map(|(trace, _)| trace)
}

/// Like [`run`], also returning the final ledger.
pub fn run_with_ledger(scenario: &Scenario) -> Result<(Trace, ChainState), ScenarioError> {
    scenario.validate()?;
    Ok(engine::Engine::new(scenario)?.run())
}

/// The bundled best-of-three bet.
pub const BO3_CONTRACT: &str = include_str!("../../../../contracts/bo3.contract");

/// Best-of-three bet along the path `Bet`, `L??`, `LW?`, `LWL`: the oracle
/// reveals `L1`, `W2` and `L3` at heights 1, 3 and 5. Nobody agrees to an
/// early payout.
pub fn bo3_demo(mode: Mode, t: u64) -> Scenario {
    let desc = crate::description::ContractDescription::parse(BO3_CONTRACT).expect("bundled contract parses");
    let (tree, secrets) = desc.build(7).expect("bundled contract builds");
    let oracle = RevealSchedule::new(&[(1, "L1"), (3, "W2"), (5, "L3")]);
    Scenario::honest(tree, secrets, mode, oracle, t).named(&format!("bo3_{mode}"))
}
