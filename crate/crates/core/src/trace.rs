//! Event log of a run. Serialized as one JSON object per line; the last line
//! is the terminal summary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{AppendError, AppendWitness, ChainState, TxInstance};
use crate::witness::{OutPoint, TxDigest};
use crate::{Height, Value};

pub const HARNESS: &str = "harness";
pub const ORACLE_ACTOR: &str = "oracle";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub height: Height,
    pub actor: String,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    Start {
        mode: String,
        fee: Value,
        t: u64,
        participants: Vec<String>,
    },
    /// One append attempt against the ledger.
    Append {
        name: String,
        digest: TxDigest,
        inputs: Vec<OutPoint>,
        signers: Vec<String>,
        reveals: Vec<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        error: Option<AppendError>,
        tx: TxInstance,
        witness: AppendWitness,
    },
    OracleReveal {
        label: String,
    },
    TxSetSent {
        to: String,
        context: String,
    },
    SignatureSent {
        to: String,
        tx: String,
        digest: TxDigest,
        context: String,
    },
    Withheld {
        to: String,
        item: String,
        context: String,
    },
    StepProposed {
        child: String,
        step: usize,
    },
    StepAgreed {
        child: String,
    },
    StepRefused {
        child: String,
    },
    StepRejected {
        child: String,
        reason: String,
    },
    GraftProposed {
        index: usize,
        origin: String,
        rel_timelock: u64,
    },
    GraftSealed {
        index: usize,
        origin: String,
    },
    FailsafeTriggered,
    InitAppended,
    GraftAppended {
        index: usize,
        origin: String,
    },
    StipulationAborted {
        withholder: String,
    },
    InvalidAction {
        reason: String,
    },
    Finalized {
        leaf: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Finalized { leaf: String },
    StipulationAborted { withholder: String },
    HeightCapExceeded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub outcome: Outcome,
    pub final_height: Height,
    pub completion_height: Option<Height>,
    pub onchain_txs: Vec<String>,
    /// Index of the graft whose root spent `Init`, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_redeemer: Option<usize>,
    /// Latest fully signed graft at the moment `Init` was appended.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latest_sealed_at_init: Option<usize>,
    pub payouts: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<Event>,
    pub summary: Option<Summary>,
}

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    summary: Summary,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("malformed trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace has no start event")]
    MissingStart,
    #[error("append of {name} at height {height} failed on replay: {error}")]
    Diverged { name: String, height: Height, error: AppendError },
    #[error("trace heights decrease at event {0}")]
    NonMonotonic(usize),
}

impl Trace {
    pub fn push(&mut self, height: Height, actor: &str, kind: EventKind) {
        self.events.push(Event { height, actor: actor.to_string(), kind });
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        if let Some(s) = &self.summary {
            out.push_str(&serde_json::to_string(&SummaryLine { summary: s.clone() }).expect("summary serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Trace, ReplayError> {
        let mut trace = Trace::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let err = |e: serde_json::Error| ReplayError::Parse { line: i + 1, message: e.to_string() };
            if line.starts_with("{\"summary\"") {
                trace.summary = Some(serde_json::from_str::<SummaryLine>(line).map_err(err)?.summary);
            } else {
                trace.events.push(serde_json::from_str(line).map_err(err)?);
            }
        }
        Ok(trace)
    }

    /// Successful appends in order.
    pub fn appends(&self) -> impl Iterator<Item = (&Event, &TxInstance, &AppendWitness)> {
        self.events.iter().filter_map(|e| match &e.kind {
            EventKind::Append { error: None, tx, witness, .. } => Some((e, tx, witness)),
            _ => None,
        })
    }

    pub fn count(&self, pred: impl Fn(&EventKind) -> bool) -> usize {
        self.events.iter().filter(|e| pred(&e.kind)).count()
    }

    /// Replays the successful appends against a fresh ledger.
    pub fn replay(&self) -> Result<ChainState, ReplayError> {
        let fee = self
            .events
            .iter()
            .find_map(|e| match &e.kind {
                EventKind::Start { fee, .. } => Some(*fee),
                _ => None,
            })
            .ok_or(ReplayError::MissingStart)?;
        for (i, w) in self.events.windows(2).enumerate() {
            if w[1].height < w[0].height {
                return Err(ReplayError::NonMonotonic(i + 1));
            }
        }
        let mut chain = ChainState::new(fee);
        for (event, tx, witness) in self.appends() {
            chain.advance_to(event.height);
            chain.try_append(tx, witness).map_err(|error| ReplayError::Diverged {
                name: tx.name.clone(),
                height: event.height,
                error,
            })?;
        }
        if let Some(s) = &self.summary {
            chain.advance_to(s.final_height);
        }
        Ok(chain)
    }
}

/// Number of signature messages in a trace.
pub fn message_census(trace: &Trace) -> usize {
    trace.count(|k| matches!(k, EventKind::SignatureSent { .. }))
}
