mod common;

use common::pair_auc;
use proptest::prelude::*;
use resattnet::metrics::{auc, confusion, summarize, ScoredPrediction};

fn preds(scores: &[f64], labels: &[usize]) -> Vec<ScoredPrediction> {
    scores.iter().zip(labels).map(|(&score, &label)| ScoredPrediction { score, label }).collect()
}

fn both_classes() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (2usize..60).prop_flat_map(|n| {
        // a coarse score grid produces ties
        (prop::collection::vec(0u32..20, n), prop::collection::vec(0usize..2, n)).prop_map(|(s, mut l)| {
            l[0] = 0;
            l[1] = 1;
            (s.into_iter().map(|v| v as f64 / 19.0).collect(), l)
        })
    })
}

#[test]
fn four_sample_example() {
    let p = preds(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]);
    assert!((auc(&p).unwrap() - 0.75).abs() < 1e-15);
}

#[test]
fn vgg_row_recombines_to_reported_accuracy() {
    // SEN 0.824 on 389 positives, SPE 0.902 on 400 negatives, ACC 0.863
    let acc: f64 = (0.824 * 389.0 + 0.902 * 400.0) / 789.0;
    assert!((acc - 0.863).abs() <= 0.002, "{acc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn auc_equals_pair_count((scores, labels) in both_classes()) {
        let got = auc(&preds(&scores, &labels)).unwrap();
        prop_assert!((got - pair_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn auc_ignores_monotone_rescaling((scores, labels) in both_classes()) {
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).tanh()).collect();
        let a = auc(&preds(&scores, &labels)).unwrap();
        let b = auc(&preds(&squashed, &labels)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn flipping_scores_mirrors_auc((scores, labels) in both_classes()) {
        let flipped: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        let a = auc(&preds(&scores, &labels)).unwrap();
        let b = auc(&preds(&flipped, &labels)).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_matches_recount(
        scores in prop::collection::vec(0.0f64..1.0, 50),
        labels in prop::collection::vec(0usize..2, 50),
        threshold in 0.0f64..1.0,
    ) {
        let c = confusion(&preds(&scores, &labels), threshold).unwrap();
        let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
        for (s, l) in scores.iter().zip(&labels) {
            let positive = *s >= threshold;
            if positive && *l == 1 { tp += 1 }
            if !positive && *l == 0 { tn += 1 }
            if positive && *l == 0 { fp += 1 }
            if !positive && *l == 1 { fn_ += 1 }
        }
        prop_assert_eq!((c.tp, c.tn, c.fp, c.fn_), (tp, tn, fp, fn_));
        let s = summarize(&preds(&scores, &labels), threshold).unwrap();
        if let Some(acc) = s.acc {
            prop_assert!((acc - (tp + tn) as f64 / 50.0).abs() < 1e-15);
        }
    }
}
