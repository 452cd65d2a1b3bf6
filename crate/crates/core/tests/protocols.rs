mod common;

use common::*;
use graftsim::contract::subtree_height;
use graftsim::description::ContractDescription;
use graftsim::exchange::Item;
use graftsim::harness::{run_with_ledger, Mode, RevealSchedule, Scenario};
use graftsim::offchain::OffchainState;
use graftsim::onchain::OnchainSession;
use graftsim::run;
use graftsim::trace::Outcome;

fn three_party() -> (graftsim::ContractTree, graftsim::description::SecretBook) {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../contracts/three_party.contract");
    let text = std::fs::read_to_string(path).unwrap();
    ContractDescription::parse(&text).unwrap().build(3).unwrap()
}

/// Signature messages in the middle phase of an on-chain stipulation.
fn onchain_body_messages(tree: &graftsim::ContractTree) -> usize {
    let (session, _) = OnchainSession::new(tree).unwrap();
    let phases = session.stipulation_phases();
    let p = tree.participants.len();
    phases[1].len() * p * (p - 1)
}

#[test]
fn onchain_stipulation_body_counts() {
    let (bo3, _) = bo3();
    let (three, _) = three_party();
    assert_eq!(bo3.nodes.len(), 15);
    assert_eq!(onchain_body_messages(&bo3), 28);
    assert_eq!(onchain_body_messages(&three), 30);
}

#[test]
fn onchain_phases_are_txset_body_root() {
    let (tree, _) = bo3();
    let (session, _) = OnchainSession::new(&tree).unwrap();
    let phases = session.stipulation_phases();
    assert_eq!(phases.len(), 3);
    assert_eq!(phases[0], vec![Item::TxSet]);
    assert_eq!(phases[2].len(), 1);
    assert_eq!(phases[2][0].label(), "Bet");
    assert!(phases[1].iter().all(|i| i.label() != "Bet"));
}

#[test]
fn offchain_phases_sign_head_last() {
    let (tree, _) = bo3();
    let st = OffchainState::new(&tree, 1).unwrap();
    let phases = st.stipulation_phases();
    assert_eq!(phases[0], vec![Item::TxSet]);
    assert_eq!(phases[1][0].label(), "Init");
    assert_eq!(phases[1].len(), tree.nodes.len() + 1);
    assert_eq!(phases[2].len(), 1);
    assert_eq!(phases[2][0].label(), "Head");
}

#[test]
fn shadow_root_waits_height_times_t() {
    let (tree, _) = three_party();
    assert_eq!(subtree_height(&tree, tree.root).unwrap(), 2);
    for t in [1, 3] {
        let st = OffchainState::new(&tree, t).unwrap();
        assert_eq!(st.grafts[0].rel_timelock(), 2 * t);
    }
}

#[test]
fn onchain_short_path_appends_three() {
    let (tree, secrets) = bo3();
    let s = path_scenario(&tree, &secrets, id(&tree, "WW"), Mode::Onchain, 1);
    let trace = run(&s).unwrap();
    assert_eq!(appended(&trace), ["Bet", "W??", "WW"]);
    assert_eq!(trace.summary.unwrap().payouts["A"], 97);
}

#[test]
fn onchain_appends_whole_path() {
    let (tree, secrets) = bo3();
    for leaf in tree.leaves() {
        let s = path_scenario(&tree, &secrets, leaf, Mode::Onchain, 1);
        let want: Vec<String> = tree.path_to(leaf).unwrap().iter().map(|&n| tree.name(n).to_string()).collect();
        assert_eq!(appended(&run(&s).unwrap()), want, "leaf {}", tree.name(leaf));
    }
}

#[test]
fn offchain_happy_path_is_three_transactions_for_every_leaf() {
    let (tree, secrets) = bo3();
    for leaf in tree.leaves() {
        for t in [1, 2] {
            let s = path_scenario(&tree, &secrets, leaf, Mode::Offchain, t);
            let trace = run(&s).unwrap();
            let name = tree.name(leaf).to_string();
            assert_eq!(appended(&trace), ["Head".to_string(), "Init".to_string(), name.clone()], "t={t}");
            assert_eq!(final_leaf(&trace).as_deref(), Some(name.as_str()));
            assert!(conserved(&trace, &tree));
        }
    }
}

#[test]
fn offchain_and_onchain_pay_the_same_leaf_shares() {
    let (tree, secrets) = bo3();
    let leaf = id(&tree, "Out_L");
    let on = run(&path_scenario(&tree, &secrets, leaf, Mode::Onchain, 1)).unwrap().summary.unwrap();
    let off = run(&path_scenario(&tree, &secrets, leaf, Mode::Offchain, 1)).unwrap().summary.unwrap();
    // Three transactions either way, so the same fees and the same split.
    assert_eq!(on.onchain_txs.len(), 3);
    assert_eq!(off.onchain_txs.len(), 3);
    assert_eq!(on.payouts, off.payouts);
    assert_eq!(off.payouts.values().sum::<u64>(), 97);
    assert!(off.payouts["A"] < off.payouts["B"]);
}

#[test]
fn missing_oracle_reveal_hits_the_height_cap() {
    let (tree, secrets) = bo3();
    let s = Scenario::honest(tree, secrets, Mode::Offchain, RevealSchedule::default(), 1);
    let (trace, chain) = run_with_ledger(&s).unwrap();
    assert_eq!(trace.summary.as_ref().unwrap().outcome, Outcome::HeightCapExceeded);
    // Deposits went into Head and nothing else moved.
    assert_eq!(appended(&trace), ["Head"]);
    assert_eq!(chain.non_deposit_count(), 1);
}

#[test]
fn message_census_matches_stipulation_rule() {
    let (tree, secrets) = bo3();
    let s = path_scenario(&tree, &secrets, id(&tree, "WW"), Mode::Onchain, 1);
    let trace = run(&s).unwrap();
    // TxSet is not a signature; each participant sends one signature per
    // transaction to the other.
    let want = stipulation_messages(&tree, Mode::Onchain) * 2 - 2;
    assert_eq!(graftsim::message_census(&trace), want);
}
