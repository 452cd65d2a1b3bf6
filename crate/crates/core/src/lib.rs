//! Deterministic simulator for Bitcoin-style contracts modelled as trees of
//! transactions over a UTxO ledger with relative timelocks.
//!
//! A contract can be executed the standard way, one on-chain transaction per
//! step, or through the optimistic off-chain protocol: participants lock
//! their deposits in a `Head` transaction, keep a pre-signed `Init`
//! transaction in reserve, and advance the contract by exchanging signatures
//! on *grafts* (copies of the remaining subtree re-rooted on `Init` with a
//! timelock proportional to the subtree height). When everybody cooperates
//! only three transactions reach the chain; otherwise any honest participant
//! can publish `Init` and the latest graft, which always unlocks before any
//! older one.
//!
//! Module map:
//! - [`contract`], [`description`]: contract trees and their file format.
//! - [`witness`]: digests, simulated signatures, secret commitments.
//! - [`ledger`]: the UTxO chain.
//! - [`exchange`]: ordered signature exchange shared by both protocols.
//! - [`onchain`], [`offchain`]: the two execution protocols.
//! - [`strategy`]: honest and adversarial participant behaviour.
//! - [`harness`], [`trace`]: the block-stepped scheduler, traces and reports.

pub mod contract;
pub mod description;
pub mod exchange;
pub mod generate;
pub mod harness;
pub mod ledger;
pub mod offchain;
pub mod onchain;
pub mod strategy;
pub mod trace;
pub mod witness;

/// Amounts in integer base units.
pub type Value = u64;
/// Block height.
pub type Height = u64;

pub use contract::{ContractTree, NodeId, ParticipantId};
pub use harness::{compare, message_census, run, Report, Scenario};
pub use ledger::{ChainState, TxInstance};
