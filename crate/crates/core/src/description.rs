//! Contract-description files: a single JSON object naming participants,
//! deposits, the fee, declared secrets and a recursive node block.
//!
//! ```json
//! {
//!   "participants": ["A", "B"],
//!   "deposits": {"A": 50, "B": 50},
//!   "fee": 1,
//!   "secrets": [{"label": "W1", "owner": "oracle"}],
//!   "nodes": {
//!     "name": "Bet",
//!     "children": [
//!       {"name": "Win", "edge": [{"reveal": "W1"}], "outputs": [{"to": "A", "share": 1}]},
//!       {"name": "Refund", "edge": [{"after": 10}], "outputs": [{"to": "A", "share": 1}, {"to": "B", "share": 1}]}
//!     ]
//!   }
//! }
//! ```
//!
//! A child may also be given as a string naming another node; this is how
//! non-tree shapes are expressed so that validation can reject them.

use std::collections::{BTreeMap, BTreeSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::{ContractTree, EdgeRequirement, NodeId, NodeTemplate, ParticipantId, PayoutShare};
use crate::witness::{secret_preimage, Reveal, SecretCommitment, SecretHash, SecretOwner, NONCE_LEN};
use crate::Value;

/// Owner string used for secrets held by the external oracle.
pub const ORACLE: &str = "oracle";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractDescription {
    pub participants: Vec<String>,
    pub deposits: BTreeMap<String, Value>,
    pub fee: Value,
    #[serde(default)]
    pub secrets: Vec<SecretDecl>,
    pub nodes: NodeDecl,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecretDecl {
    pub label: String,
    pub owner: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDecl {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edge: Vec<EdgeDecl>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<ShareDecl>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<ChildDecl>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeDecl {
    Auth(Vec<String>),
    Reveal(String),
    After(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShareDecl {
    pub to: String,
    pub share: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChildDecl {
    Ref(String),
    Node(Box<NodeDecl>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DescriptionError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("secret {0} declared twice")]
    DuplicateSecret(String),
    #[error("secret commitments for {0} and {1} collide")]
    HashCollision(String, String),
}

impl From<serde_json::Error> for DescriptionError {
    fn from(e: serde_json::Error) -> Self {
        DescriptionError::Parse { line: e.line(), column: e.column(), message: e.to_string() }
    }
}

/// Nonces of every declared secret. The oracle (or owning participant)
/// uses it to produce reveals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SecretBook {
    nonces: BTreeMap<String, [u8; NONCE_LEN]>,
    commitments: BTreeMap<String, SecretCommitment>,
}

impl SecretBook {
    /// Draws one 16-byte nonce per label, in label order, from a ChaCha20
    /// stream seeded with `seed`.
    pub fn generate<'a>(
        labels: impl IntoIterator<Item = (&'a str, SecretOwner)>,
        seed: u64,
    ) -> Result<Self, DescriptionError> {
        let mut sorted: BTreeMap<&str, SecretOwner> = BTreeMap::new();
        for (label, owner) in labels {
            if sorted.insert(label, owner).is_some() {
                return Err(DescriptionError::DuplicateSecret(label.to_string()));
            }
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut book = SecretBook::default();
        let mut hashes: BTreeMap<SecretHash, String> = BTreeMap::new();
        for (label, owner) in sorted {
            let mut nonce = [0u8; NONCE_LEN];
            rng.fill_bytes(&mut nonce);
            let c = SecretCommitment::commit(label, owner, &nonce);
            if let Some(other) = hashes.insert(c.hash, label.to_string()) {
                return Err(DescriptionError::HashCollision(other, label.to_string()));
            }
            book.nonces.insert(label.to_string(), nonce);
            book.commitments.insert(label.to_string(), c);
        }
        Ok(book)
    }

    pub fn commitment(&self, label: &str) -> Option<&SecretCommitment> {
        self.commitments.get(label)
    }

    pub fn commitments(&self) -> &BTreeMap<String, SecretCommitment> {
        &self.commitments
    }

    pub fn reveal(&self, label: &str) -> Option<Reveal> {
        let nonce = self.nonces.get(label)?;
        Some(Reveal {
            commitment: self.commitments[label].clone(),
            preimage: secret_preimage(label, nonce),
        })
    }
}

impl ContractDescription {
    pub fn parse(text: &str) -> Result<Self, DescriptionError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Builds the contract tree with node ids assigned in preorder. The tree
    /// is not validated here; run [`crate::contract::validate_tree`] on it.
    pub fn build(&self, seed: u64) -> Result<(ContractTree, SecretBook), DescriptionError> {
        let owner = |o: &str| {
            if o == ORACLE {
                SecretOwner::External
            } else {
                SecretOwner::Participant(ParticipantId::new(o))
            }
        };
        let book = SecretBook::generate(self.secrets.iter().map(|s| (s.label.as_str(), owner(&s.owner))), seed)?;

        let mut decls: Vec<(&NodeDecl, Vec<Result<NodeId, &str>>)> = Vec::new();
        flatten(&self.nodes, &mut decls);
        let mut by_name: BTreeMap<&str, NodeId> = BTreeMap::new();
        for (i, (d, _)) in decls.iter().enumerate() {
            by_name.entry(d.name.as_str()).or_insert(NodeId(i as u32));
        }
        let dangling = NodeId(decls.len() as u32);

        let mut nodes = Vec::with_capacity(decls.len());
        for (i, (d, kids)) in decls.iter().enumerate() {
            let id = NodeId(i as u32);
            let edge = d
                .edge
                .iter()
                .map(|e| match e {
                    EdgeDecl::Auth(ps) => EdgeRequirement::AuthBy(ps.iter().map(|p| ParticipantId::new(p.as_str())).collect()),
                    EdgeDecl::Reveal(label) => EdgeRequirement::Reveal(book.commitment(label).cloned().unwrap_or(
                        SecretCommitment { label: label.clone(), hash: SecretHash::default(), owner: SecretOwner::External },
                    )),
                    EdgeDecl::After(n) => EdgeRequirement::After(*n),
                })
                .collect();
            let children = kids
                .iter()
                .map(|k| match k {
                    Ok(id) => *id,
                    Err(name) => by_name.get(name).copied().unwrap_or(dangling),
                })
                .collect();
            nodes.push(NodeTemplate {
                id,
                name: d.name.clone(),
                edge,
                payout: d
                    .outputs
                    .iter()
                    .map(|s| PayoutShare { to: ParticipantId::new(s.to.as_str()), share: s.share })
                    .collect(),
                outputs: Vec::new(),
                children,
            });
        }

        let participants: BTreeSet<ParticipantId> =
            self.participants.iter().map(|p| ParticipantId::new(p.as_str())).collect();
        let mut tree = ContractTree {
            participants,
            deposits: self.deposits.iter().map(|(p, v)| (ParticipantId::new(p.as_str()), *v)).collect(),
            secrets: book.commitments.clone(),
            root: NodeId(0),
            nodes,
            fee: self.fee,
        };
        if crate::contract::validate_tree(&tree)
            .iter()
            .all(|e| !is_shape_error(e))
        {
            let _ = tree.refresh_outputs();
        }
        Ok((tree, book))
    }
}

fn flatten<'a>(d: &'a NodeDecl, out: &mut Vec<(&'a NodeDecl, Vec<Result<NodeId, &'a str>>)>) -> NodeId {
    let id = NodeId(out.len() as u32);
    out.push((d, Vec::new()));
    let kids = d
        .children
        .iter()
        .map(|c| match c {
            ChildDecl::Node(n) => Ok(flatten(n, out)),
            ChildDecl::Ref(name) => Err(name.as_str()),
        })
        .collect();
    out[id.index()].1 = kids;
    id
}

fn is_shape_error(e: &crate::contract::StructuralError) -> bool {
    use crate::contract::StructuralError::*;
    matches!(e, DuplicateId(_) | UnknownRoot(_) | UnknownChild { .. } | NotATree(_) | Cycle(_) | Orphan(_))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::{validate_tree, StructuralError};

    const SMALL: &str = r#"{
        "participants": ["A", "B"],
        "deposits": {"A": 5, "B": 5},
        "fee": 1,
        "secrets": [{"label": "S", "owner": "A"}],
        "nodes": {"name": "R", "children": [
            {"name": "X", "edge": [{"reveal": "S"}, {"auth": ["B"]}], "outputs": [{"to": "A", "share": 1}]},
            {"name": "Y", "edge": [{"after": 3}], "outputs": [{"to": "B", "share": 1}]}
        ]}
    }"#;

    #[test]
    fn parses_and_builds_in_preorder() {
        let desc = ContractDescription::parse(SMALL).unwrap();
        let (tree, book) = desc.build(1).unwrap();
        assert!(validate_tree(&tree).is_empty());
        let names: Vec<&str> = tree.nodes.iter().map(|n| n.name.as_str()).collect();
        assert_eq!(names, ["R", "X", "Y"]);
        assert_eq!(tree.nodes[0].children, vec![NodeId(1), NodeId(2)]);
        assert_eq!(tree.nodes[2].outputs[0].value, 8);
        assert!(crate::witness::check_reveal(&book.reveal("S").unwrap()));
    }

    #[test]
    fn nonces_depend_on_seed_only() {
        let desc = ContractDescription::parse(SMALL).unwrap();
        let (a, _) = desc.build(1).unwrap();
        let (b, _) = desc.build(1).unwrap();
        let (c, _) = desc.build(2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.secrets["S"].hash, c.secrets["S"].hash);
    }

    #[test]
    fn references_can_express_non_trees() {
        let text = SMALL.replace(r#"{"name": "Y", "edge": [{"after": 3}], "outputs": [{"to": "B", "share": 1}]}"#, r#""X""#);
        let (tree, _) = ContractDescription::parse(&text).unwrap().build(1).unwrap();
        assert_eq!(validate_tree(&tree), vec![StructuralError::NotATree(NodeId(1))]);
    }

    #[test]
    fn undeclared_secret_is_a_validation_error() {
        let text = SMALL.replace(r#"{"reveal": "S"}"#, r#"{"reveal": "Q"}"#);
        let (tree, _) = ContractDescription::parse(&text).unwrap().build(1).unwrap();
        assert_eq!(
            validate_tree(&tree),
            vec![StructuralError::UndeclaredSecret { node: NodeId(1), label: "Q".into() }]
        );
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = ContractDescription::parse("{\n  \"participants\": [\"A\",]\n}").unwrap_err();
        match err {
            DescriptionError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_secret_is_rejected() {
        let text = SMALL.replace(
            r#"[{"label": "S", "owner": "A"}]"#,
            r#"[{"label": "S", "owner": "A"}, {"label": "S", "owner": "B"}]"#,
        );
        assert!(matches!(
            ContractDescription::parse(&text).unwrap().build(1),
            Err(DescriptionError::DuplicateSecret(_))
        ));
    }
}
