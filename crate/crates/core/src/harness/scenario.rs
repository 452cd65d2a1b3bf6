//! Scenario files (JSON).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contract::{validate_tree, ParticipantId};
use crate::description::ContractDescription;
use crate::strategy::Strategy;
use crate::Value;

use super::{Mode, RevealSchedule, Scenario, ScenarioError, DEFAULT_PATIENCE};

/// A contract given by path (relative to the scenario file) or inline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ContractRef {
    Path(String),
    Inline(Box<ContractDescription>),
}

fn default_t() -> u64 {
    1
}

fn default_patience() -> u64 {
    DEFAULT_PATIENCE
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: Option<String>,
    pub contract: ContractRef,
    pub mode: Mode,
    #[serde(default = "default_t")]
    pub t: u64,
    /// Overrides the contract's per-transaction fee.
    #[serde(default)]
    pub fee: Option<Value>,
    #[serde(default = "default_patience")]
    pub patience: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub oracle: RevealSchedule,
    /// `AuthBy` nodes every participant agrees to unless its strategy says
    /// otherwise.
    #[serde(default)]
    pub agree: BTreeSet<String>,
    /// Participants not listed are honest.
    #[serde(default)]
    pub strategies: BTreeMap<String, Strategy>,
    #[serde(default)]
    pub order: Option<Vec<String>>,
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })
}

fn parse_error(path: &Path, e: &serde_json::Error) -> ScenarioError {
    ScenarioError::Parse { path: path.display().to_string(), line: e.line(), column: e.column(), message: e.to_string() }
}

impl ScenarioFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| parse_error(path, &e))
    }

    /// Builds the scenario; `dir` resolves a contract path. The secret
    /// nonces are drawn from `seed`.
    pub fn into_scenario(self, dir: &Path, seed: u64) -> Result<Scenario, ScenarioError> {
        let mut desc = match self.contract {
            ContractRef::Inline(d) => *d,
            ContractRef::Path(p) => {
                let path = dir.join(p);
                let text = read(&path)?;
                serde_json::from_str(&text).map_err(|e| parse_error(&path, &e))?
            }
        };
        if let Some(fee) = self.fee {
            desc.fee = fee;
        }
        let (tree, secrets) = desc.build(seed)?;
        let errors = validate_tree(&tree);
        if !errors.is_empty() {
            return Err(ScenarioError::InvalidContract(errors));
        }
        let mut scenario = Scenario::honest(tree, secrets, self.mode, self.oracle, self.t)
            .with_agree(&self.agree)
            .with_patience(self.patience);
        scenario.name = self.name.unwrap_or_default();
        scenario.seed = seed;
        for (p, s) in self.strategies {
            if !scenario.contract.participants.contains(&ParticipantId::new(p.as_str())) {
                return Err(ScenarioError::UnknownParticipant(p));
            }
            scenario = scenario.with_strategy(&p, s);
        }
        if let Some(order) = self.order {
            scenario.order = Some(order.into_iter().map(ParticipantId::new).collect());
        }
        scenario.validate()?;
        Ok(scenario)
    }
}

/// Loads a scenario file. `seed` overrides the file's seed.
pub fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario, ScenarioError> {
    let file = ScenarioFile::parse(&read(path)?, path)?;
    let seed = seed.unwrap_or(file.seed);
    let mut scenario = file.into_scenario(path.parent().unwrap_or(Path::new(".")), seed)?;
    if scenario.name.is_empty() {
        scenario.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    }
    Ok(scenario)
}
