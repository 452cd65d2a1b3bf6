mod common;

use common::*;
use graftsim::harness::{bo3_demo, Mode};
use graftsim::run;
use graftsim::strategy::{RollbackTarget, Strategy, StrategyKind};
use graftsim::trace::{EventKind, Outcome};

fn demo_with(p: &str, kind: StrategyKind) -> graftsim::trace::Trace {
    run(&bo3_demo(Mode::Offchain, 1).with_strategy(p, Strategy::new(kind))).unwrap()
}

#[test]
fn premature_init_mid_exchange_keeps_the_sealed_graft() {
    let trace = demo_with("A", StrategyKind::PrematureInit { at_step: 2, mid_exchange: true });
    assert_eq!(appended(&trace), ["Head", "Init", "LW?", "LWL"]);
    let f = failsafe(&trace).unwrap();
    assert_eq!(f.latest_sealed, "LW?");
    assert!(!f.sealed_after_init);
}

#[test]
fn silent_abort_at_start_falls_back_to_the_shadow_copy() {
    let trace = demo_with("B", StrategyKind::SilentAborter { at_step: 0 });
    assert_eq!(appended(&trace), ["Head", "Init", "Bet", "L??", "LW?", "LWL"]);
    assert_eq!(failsafe(&trace).unwrap().redeemer.as_deref(), Some("Bet"));
}

#[test]
fn staller_is_outwaited() {
    let trace = demo_with("B", StrategyKind::Staller { at_message: None, at_step: Some(1) });
    let f = failsafe(&trace).unwrap();
    assert_eq!(f.redeemer.as_deref(), Some(f.latest_sealed.as_str()));
    assert_eq!(final_leaf(&trace).as_deref(), Some("LWL"));
    assert!(trace.count(|k| matches!(k, EventKind::Withheld { .. })) > 0);
}

#[test]
fn single_rollback_attacker_cannot_roll_back() {
    for open in [None, Some(0), Some(1), Some(2), Some(3)] {
        for target in [RollbackTarget::Oldest, RollbackTarget::Previous] {
            let trace = demo_with("A", StrategyKind::RollbackAttacker { open_after_step: open, target });
            if let Some(f) = failsafe(&trace) {
                assert_eq!(f.redeemer.as_deref(), Some(f.latest_sealed.as_str()), "open {open:?} {target:?}");
            }
            assert_eq!(final_leaf(&trace).as_deref(), Some("LWL"));
        }
    }
}

#[test]
fn withheld_stipulation_message_aborts_without_spending_deposits() {
    for mode in [Mode::Onchain, Mode::Offchain] {
        let s = bo3_demo(mode, 1)
            .with_strategy("B", Strategy::new(StrategyKind::Staller { at_message: Some(3), at_step: None }));
        let trace = run(&s).unwrap();
        match &trace.summary.as_ref().unwrap().outcome {
            Outcome::StipulationAborted { withholder } => assert_eq!(withholder, "B"),
            other => panic!("{mode}: {other:?}"),
        }
        assert!(appended(&trace).is_empty());
    }
}

#[test]
fn worst_case_is_path_plus_two() {
    let (tree, secrets) = bo3();
    let leaf = id(&tree, "WLL");
    let s = path_scenario(&tree, &secrets, leaf, Mode::Offchain, 2)
        .with_strategy("B", Strategy::new(StrategyKind::PrematureInit { at_step: 0, mid_exchange: false }));
    let got = appended(&run(&s).unwrap());
    assert_eq!(got, ["Head", "Init", "Bet", "W??", "WL?", "WLL"]);
}

#[test]
fn polling_order_does_not_change_who_wins() {
    let base = bo3_demo(Mode::Offchain, 1).with_strategy("B", Strategy::new(StrategyKind::SilentAborter { at_step: 1 }));
    let ab = run(&base.clone().with_order(vec!["A".into(), "B".into()])).unwrap();
    let ba = run(&base.with_order(vec!["B".into(), "A".into()])).unwrap();
    assert_eq!(final_leaf(&ab), final_leaf(&ba));
    assert_eq!(ab.summary.unwrap().payouts, ba.summary.unwrap().payouts);
}
