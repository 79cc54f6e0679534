use proptest::prelude::*;
use xplain_core::metrics::{paper_ppv, precision_recall_f1, roc_auc_ovr, ConfusionMatrix, MetricsReport};

fn confusion() -> impl Strategy<Value = ConfusionMatrix> {
    (2usize..6).prop_flat_map(|k| {
        prop::collection::vec(prop::collection::vec(1u64..50, k), k)
            .prop_map(|rows| ConfusionMatrix::from_rows(&rows).unwrap())
    })
}

proptest! {
    #[test]
    fn macro_scores_are_bounded(cm in confusion()) {
        let labels: Vec<String> = (0..cm.classes()).map(|c| c.to_string()).collect();
        let r = MetricsReport::from_confusion(&cm, &labels);
        for v in [r.macro_precision, r.macro_recall, r.macro_f1, r.accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn identical_classes_give_equal_macro_f1(k in 2usize..6, tp in 1u64..50, off in 0u64..10) {
        let rows: Vec<Vec<u64>> = (0..k).map(|i| (0..k).map(|j| if i == j { tp } else { off }).collect()).collect();
        let cm = ConfusionMatrix::from_rows(&rows).unwrap();
        let labels: Vec<String> = (0..k).map(|c| c.to_string()).collect();
        let r = MetricsReport::from_confusion(&cm, &labels);
        prop_assert!((r.macro_f1 - precision_recall_f1(&cm, 0).f1).abs() <= 1e-12);
    }

    #[test]
    fn weighted_paper_ppv_is_accuracy(cm in confusion()) {
        let total = cm.total() as f64;
        let weighted: f64 = (0..cm.classes()).map(|c| paper_ppv(&cm, c).unwrap() * cm.row_total(c) as f64 / total).sum();
        prop_assert!((weighted - cm.accuracy()).abs() <= 1e-12);
    }

    #[test]
    fn scores_follow_class_permutations(cm in confusion(), rot in 1usize..5) {
        let k = cm.classes();
        let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k).collect();
        let mut rows = vec![vec![0; k]; k];
        for i in 0..k {
            for j in 0..k {
                rows[perm[i]][perm[j]] = cm.get(i, j);
            }
        }
        let permuted = ConfusionMatrix::from_rows(&rows).unwrap();
        for (c, &pc) in perm.iter().enumerate() {
            prop_assert_eq!(precision_recall_f1(&cm, c), precision_recall_f1(&permuted, pc));
        }
    }

    #[test]
    fn auc_ignores_monotone_rescoring(
        pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..60),
    ) {
        let (scores, labels): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let base = roc_auc_ovr(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert!((base.auc - roc_auc_ovr(&warped, &labels).unwrap().auc).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&base.auc));
        prop_assert!(base.points.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
        prop_assert_eq!(*base.points.last().unwrap(), (1.0, 1.0));
    }
}
