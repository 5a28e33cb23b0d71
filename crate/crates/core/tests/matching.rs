use kongnet::eval::{match_points, ScoredPoint};
use kongnet::testkit::oracle_match;
use proptest::prelude::*;

fn scored(points: &[(f64, f64, f64)]) -> Vec<ScoredPoint> {
    points
        .iter()
        .map(|&(x, y, confidence)| ScoredPoint { x, y, confidence })
        .collect()
}

fn greedy_tp(preds: &[(f64, f64, f64)], gts: &[(f64, f64)], r: f64) -> usize {
    match_points(&scored(preds), gts, r).unwrap().tp
}

fn xy(preds: &[(f64, f64, f64)]) -> Vec<(f64, f64)> {
    preds.iter().map(|p| (p.0, p.1)).collect()
}

#[test]
fn disjoint_pairs_agree() {
    let preds = [(0.0, 0.0, 0.9), (50.0, 50.0, 0.8)];
    let gts = [(1.0, 1.0), (51.0, 49.0)];
    assert_eq!(greedy_tp(&preds, &gts, 6.0), 2);
    assert_eq!(oracle_match(&xy(&preds), &gts, 6.0), 2);
}

#[test]
fn crossing_pair_greedy_is_optimal() {
    // Each prediction is closest to the ground truth on the other side.
    let preds = [(0.0, 0.0, 0.9), (4.0, 0.0, 0.8)];
    let gts = [(3.0, 1.0), (1.0, 1.0)];
    assert_eq!(greedy_tp(&preds, &gts, 4.0), 2);
    assert_eq!(oracle_match(&xy(&preds), &gts, 4.0), 2);
}

#[test]
fn adversarial_triple_costs_greedy_one_match() {
    // The confident prediction takes the nearer ground truth, which is the
    // only one the second prediction could reach.
    let preds = [(5.0, 0.0, 0.9), (0.0, 0.0, 0.5)];
    let gts = [(3.0, 0.0), (9.0, 0.0)];
    let greedy = greedy_tp(&preds, &gts, 4.5);
    let best = oracle_match(&xy(&preds), &gts, 4.5);
    eprintln!("adversarial case: greedy {greedy}, optimal {best}");
    assert_eq!((greedy, best), (1, 2));
}

fn ambiguous(preds: &[(f64, f64)], gts: &[(f64, f64)], r: f64) -> bool {
    let near = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).hypot(a.1 - b.1) <= r;
    preds.iter().any(|&p| gts.iter().filter(|&&g| near(p, g)).count() > 1)
        || gts.iter().any(|&g| preds.iter().filter(|&&p| near(p, g)).count() > 1)
}

proptest! {
    #[test]
    fn greedy_bounded_by_optimal(
        preds in prop::collection::vec((0.0f64..30.0, 0.0f64..30.0, 0.0f64..1.0), 0..=8),
        gts in prop::collection::vec((0.0f64..30.0, 0.0f64..30.0), 0..=8),
        r in 2.0f64..8.0,
    ) {
        let greedy = greedy_tp(&preds, &gts, r);
        let best = oracle_match(&xy(&preds), &gts, r);
        // Greedy yields a maximal matching, which is at least half a maximum one.
        prop_assert!(greedy <= best);
        prop_assert!(2 * greedy >= best);
        if !ambiguous(&xy(&preds), &gts, r) {
            prop_assert_eq!(greedy, best);
        }
    }
}
