//! Kappa and AUC against first-principles oracles; the simple rates against
//! hand arithmetic.

use dilnet::metrics::{auc, basic_rates, confusion, kappa, ConfusionMatrix, MetricsReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod oracles;

use oracles::{auc_pairwise, auc_trapezoid, kappa_oracle, random_set};

#[test]
fn auc_matches_pairwise_and_trapezoid_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let (scores, labels) = random_set(&mut rng);
        let got = auc(&scores, &labels).unwrap();
        let pairwise = auc_pairwise(&scores, &labels);
        let trapezoid = auc_trapezoid(&scores, &labels);
        assert!((got - pairwise).abs() <= 1e-12, "case {case}: {got} vs pairwise {pairwise}");
        assert!((got - trapezoid).abs() <= 1e-12, "case {case}: {got} vs trapezoid {trapezoid}");
    }
}

#[test]
fn kappa_matches_marginal_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..1000 {
        let (scores, labels) = random_set(&mut rng);
        let threshold = rng.gen::<f64>();
        let pred: Vec<u8> = scores.iter().map(|&s| (s >= threshold) as u8).collect();
        let got = kappa(&confusion(&scores, &labels, threshold).unwrap());
        let want = kappa_oracle(&pred, &labels);
        match (got, want) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "case {case}: {a} vs {b}"),
            (a, b) => assert_eq!(a, b, "case {case}"),
        }
    }
}

fn cm(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionMatrix {
    ConfusionMatrix { tp, tn, fp, fn_ }
}

#[test]
fn rates_on_fixed_confusion_matrices() {
    // 40 TP, 45 TN, 5 FP, 10 FN
    let r = basic_rates(&cm(40, 45, 5, 10));
    assert_eq!(r.accuracy, Some(0.85));
    assert_eq!(r.sensitivity, Some(0.8));
    assert_eq!(r.specificity, Some(0.9));

    let r = basic_rates(&cm(7, 0, 3, 0));
    assert_eq!(r.accuracy, Some(0.7));
    assert_eq!(r.sensitivity, Some(1.0));
    assert_eq!(r.specificity, Some(0.0));

    // no negatives: specificity undefined rather than 0/0
    let r = basic_rates(&cm(3, 0, 0, 1));
    assert_eq!(r.specificity, None);
    assert_eq!(r.sensitivity, Some(0.75));
}

#[test]
fn kappa_on_fixed_confusion_matrices() {
    // po = 0.85, pe = (45·50 + 55·50)/100² = 0.5
    assert!((kappa(&cm(40, 45, 5, 10)).unwrap() - 0.7).abs() < 1e-15);
    assert_eq!(kappa(&cm(10, 10, 0, 0)), Some(1.0));
    assert_eq!(kappa(&cm(0, 0, 10, 10)), Some(-1.0));
    // both raters constant and agreeing: chance agreement is 1
    assert_eq!(kappa(&cm(5, 0, 0, 0)), None);
}

#[test]
fn perfect_scorer_reports_all_ones() {
    let labels = [0u8, 1, 1, 0, 1, 0];
    let scores: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let r = MetricsReport::from_scores(&scores, &labels, 0.5).unwrap();
    assert_eq!(r.values(), [Some(1.0); 5]);
    assert_eq!(r.table_row("oracle"), "| oracle | 100.0 | 100.0 | 100.0 | 100.0 | 100.0 |");
}

#[test]
fn single_class_sets_leave_auc_undefined() {
    let r = MetricsReport::from_scores(&[0.2, 0.9], &[1, 1], 0.5).unwrap();
    assert_eq!(r.auc, None);
    assert!(auc(&[0.2, 0.9], &[1, 1]).is_err());
}

#[test]
fn threshold_ties_count_as_positive() {
    let c = confusion(&[0.5, 0.4999], &[1, 0], 0.5).unwrap();
    assert_eq!(c, cm(1, 1, 0, 0));
}

#[test]
fn malformed_inputs_are_rejected() {
    assert!(confusion(&[0.1], &[2], 0.5).is_err());
    assert!(confusion(&[0.1, 0.2], &[1], 0.5).is_err());
}
