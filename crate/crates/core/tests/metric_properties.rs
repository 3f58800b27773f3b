use ndarray::Array2;
use proptest::prelude::*;

use avloc_core::datamodel::Polarity;
use avloc_core::evaluation::{
    ciou_auc, extended_metrics, pr_curve, sample_iou, segmentation_metrics, DetectionSample,
};

fn grid(bits: &[bool]) -> Array2<bool> {
    Array2::from_shape_vec((4, 4), bits.to_vec()).unwrap()
}

proptest! {
    #[test]
    fn raising_ious_never_lowers_ciou_or_auc(
        ious in prop::collection::vec(0.0f64..=1.0, 1..30),
        bumps in prop::collection::vec(0.0f64..=1.0, 30),
    ) {
        let better: Vec<f64> = ious.iter().zip(&bumps).map(|(v, b)| (v + b * (1.0 - v)).min(1.0)).collect();
        let (c0, a0) = ciou_auc(&ious).unwrap();
        let (c1, a1) = ciou_auc(&better).unwrap();
        prop_assert!(c1 >= c0 && a1 >= a0);
        prop_assert!((0.0..=1.0).contains(&a0) && (0.0..=1.0).contains(&c0));
    }

    #[test]
    fn growing_pred_toward_gt_never_lowers_miou(
        gt in prop::collection::vec(any::<bool>(), 16),
        pred in prop::collection::vec(any::<bool>(), 16),
        fix in 0usize..16,
    ) {
        let gt = grid(&gt);
        let before = grid(&pred);
        let mut after = before.clone();
        // Set one wrong pixel to the ground truth value.
        let wrong: Vec<_> = before.indexed_iter().filter(|(ix, v)| **v != gt[*ix]).map(|(ix, _)| ix).collect();
        if !wrong.is_empty() {
            let ix = wrong[fix % wrong.len()];
            after[ix] = gt[ix];
        }
        let i0 = sample_iou(&before, &gt).unwrap();
        let i1 = sample_iou(&after, &gt).unwrap();
        prop_assert!(i1 >= i0 - 1e-12);
        let (m0, _) = segmentation_metrics(&[(&before, &gt)]).unwrap();
        let (m1, _) = segmentation_metrics(&[(&after, &gt)]).unwrap();
        prop_assert!(m1 >= m0 - 1e-12);
    }

    #[test]
    fn extended_metrics_stay_in_range(
        raw in prop::collection::vec((0u8..8, any::<bool>(), 0.0f64..=1.0), 1..25),
    ) {
        let mut samples: Vec<DetectionSample> = raw
            .iter()
            .map(|&(s, pos, iou)| DetectionSample {
                confidence_score: s as f64 / 7.0,
                polarity: if pos { Polarity::Positive } else { Polarity::NonVisible },
                iou: pos.then_some(iou),
            })
            .collect();
        samples.push(DetectionSample { confidence_score: 0.5, polarity: Polarity::Positive, iou: Some(0.9) });
        let e = extended_metrics(&samples).unwrap();
        for v in [e.ap, e.max_f1, e.loc_acc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let curve = pr_curve(&samples).unwrap();
        for w in curve.windows(2) {
            prop_assert!(w[1].threshold < w[0].threshold);
            prop_assert!(w[1].recall >= w[0].recall);
        }
    }
}
