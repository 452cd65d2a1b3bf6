use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::trace::{message_census, Outcome, Trace};
use crate::{Height, Value};

use super::{run, Mode, Scenario, ScenarioError};

/// Per-run summary; the comparison fields are filled in by [`compare`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub mode: Mode,
    pub outcome: Outcome,
    pub onchain_tx_count: usize,
    pub onchain_txs: Vec<String>,
    pub fee: Value,
    pub fees_paid: Value,
    pub total_deposits: Value,
    pub completion_height: Option<Height>,
    pub message_count: usize,
    pub payouts: BTreeMap<String, Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fees_saved_vs_baseline: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra_delay_blocks: Option<i64>,
}

impl Report {
    pub fn from_trace(scenario: &Scenario, trace: &Trace) -> Report {
        let summary = trace.summary.clone().expect("finished trace");
        let fee = scenario.contract.fee;
        Report {
            scenario: scenario.name.clone(),
            mode: scenario.mode,
            outcome: summary.outcome,
            onchain_tx_count: summary.onchain_txs.len(),
            fees_paid: fee * summary.onchain_txs.len() as Value,
            onchain_txs: summary.onchain_txs,
            fee,
            total_deposits: scenario.contract.total_deposits(),
            completion_height: summary.completion_height,
            message_count: message_census(trace),
            payouts: summary.payouts,
            fees_saved_vs_baseline: None,
            extra_delay_blocks: None,
        }
    }
}

/// Runs an off-chain scenario and its on-chain baseline and reports the
/// off-chain run with fee savings and extra delay filled in.
pub fn compare(offchain: &Scenario, onchain: &Scenario) -> Result<Report, ScenarioError> {
    if offchain.mode != Mode::Offchain || onchain.mode != Mode::Onchain {
        return Err(ScenarioError::IncomparableScenarios("mode".into()));
    }
    if offchain.contract != onchain.contract {
        return Err(ScenarioError::IncomparableScenarios("contract".into()));
    }
    if offchain.oracle != onchain.oracle {
        return Err(ScenarioError::IncomparableScenarios("oracle schedule".into()));
    }
    let off = Report::from_trace(offchain, &run(offchain)?);
    let on = Report::from_trace(onchain, &run(onchain)?);
    let mut report = off;
    report.fees_saved_vs_baseline = Some(on.fees_paid as i64 - report.fees_paid as i64);
    if let (Some(a), Some(b)) = (report.completion_height, on.completion_height) {
        report.extra_delay_blocks = Some(a as i64 - b as i64);
    }
    Ok(report)
}
