use mtvssl::eval::cam_from_features;
use mtvssl::losses::{info_nce_from_similarities, kd_loss, motion_loss, similarity, NegativeQueue};
use mtvssl::model::{momentum_update, ParamSet};
use mtvssl::teacher::SegmentationProbMap;
use ndarray::{Array3, Array4, ArrayD, IxDyn};
use proptest::prelude::*;

/// Channel-first `(C, H, W)` logits.
fn logits(h: usize, w: usize, c: usize) -> impl Strategy<Value = Array3<f64>> {
    prop::collection::vec(-8.0f64..8.0, h * w * c).prop_map(move |v| Array3::from_shape_vec((c, h, w), v).unwrap())
}

fn map_pair() -> impl Strategy<Value = (SegmentationProbMap, SegmentationProbMap)> {
    (1usize..4, 1usize..4, 2usize..6).prop_flat_map(|(h, w, c)| {
        (logits(h, w, c), logits(h, w, c)).prop_map(|(a, b)| {
            (SegmentationProbMap::from_logits(a.view()), SegmentationProbMap::from_logits(b.view()))
        })
    })
}

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn entropy(m: &SegmentationProbMap) -> f64 {
    let n = (m.height() * m.width()) as f64;
    -m.probs().iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>() / n
}

proptest! {
    #[test]
    fn probability_maps_sum_to_one(l in logits(2, 5, 3)) {
        let m = SegmentationProbMap::from_logits(l.view());
        prop_assert_eq!(m.probs().dim(), (2, 5, 3));
        for row in m.probs().rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn kd_is_minimised_by_the_teacher((t, s) in map_pair()) {
        let own = kd_loss(&t, &t).unwrap();
        prop_assert!((own - entropy(&t)).abs() < 1e-9);
        prop_assert!(kd_loss(&t, &s).unwrap() >= own - 1e-12);
    }

    #[test]
    fn similarity_is_bounded_symmetric_and_scale_free(u in vector(6), v in vector(6), k in 0.01f64..100.0) {
        let d = similarity(&u, &v).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&d));
        prop_assert!((d - similarity(&v, &u).unwrap()).abs() < 1e-15);
        let scaled: Vec<f64> = u.iter().map(|x| x * k).collect();
        prop_assert!((d - similarity(&scaled, &v).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn motion_loss_is_a_bounded_hinge(a in vector(5), p in vector(5), n in vector(5), margin in 0.0f64..1.0) {
        let l = motion_loss(&a, &p, &n, margin).unwrap();
        let gap = similarity(&a, &p).unwrap() - similarity(&a, &n).unwrap();
        prop_assert!(l >= 0.0 && l <= margin + 2.0 + 1e-12);
        prop_assert!((l - (margin - gap).max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn info_nce_is_non_negative_and_falls_with_the_positive(
        d_pos in -1.0f64..1.0,
        d_neg in prop::collection::vec(-1.0f64..1.0, 1..40),
        tau in 0.02f64..2.0,
        bump in 0.01f64..0.5,
    ) {
        let l = info_nce_from_similarities(d_pos, &d_neg, tau).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!(info_nce_from_similarities(d_pos + bump, &d_neg, tau).unwrap() < l);
        let same = vec![d_pos; d_neg.len()];
        let uniform = ((d_neg.len() + 1) as f64).ln();
        prop_assert!((info_nce_from_similarities(d_pos, &same, tau).unwrap() - uniform).abs() < 1e-9);
    }

    #[test]
    fn queue_keeps_the_newest_keys_in_order(capacity in 1usize..12, pushes in 0usize..60) {
        let keys: Vec<Vec<f64>> = (0..pushes).map(|i| unit(&[1.0, i as f64])).collect();
        let mut q = NegativeQueue::new(capacity, 2);
        for k in &keys {
            q.push(k).unwrap();
        }
        let kept = pushes.min(capacity);
        prop_assert_eq!(q.len(), kept);
        prop_assert_eq!(q.snapshot(), keys[pushes - kept..].to_vec());
    }

    #[test]
    fn momentum_update_is_a_convex_combination(
        s in prop::collection::vec(-5.0f64..5.0, 8),
        t in prop::collection::vec(-5.0f64..5.0, 8),
        m in 0.0f64..=1.0,
    ) {
        let set = |v: &[f64]| -> ParamSet {
            [("w".to_string(), ArrayD::from_shape_vec(IxDyn(&[8]), v.to_vec()).unwrap())].into_iter().collect()
        };
        let student = set(&s);
        let mut shadow = set(&t);
        momentum_update(&student, &mut shadow, m).unwrap();
        for ((new, old), st) in shadow.get("w").iter().zip(&t).zip(&s) {
            prop_assert!((new - (m * old + (1.0 - m) * st)).abs() < 1e-12);
            prop_assert!(*new >= old.min(*st) - 1e-12 && *new <= old.max(*st) + 1e-12);
        }
    }

    #[test]
    fn cam_is_normalised_and_scale_invariant(
        f in prop::collection::vec(0.0f64..3.0, 3 * 2 * 4 * 4),
        w in prop::collection::vec(-1.0f64..1.0, 3),
        exp in -6i32..6,
    ) {
        let features = Array4::from_shape_vec((3, 2, 4, 4), f).unwrap();
        let cam = cam_from_features(features.view(), &w, 8, 8).unwrap();
        prop_assert!(cam.iter().all(|v| (0.0..=1.0).contains(v)));
        let scaled: Vec<f64> = w.iter().map(|x| x * 2f64.powi(exp)).collect();
        prop_assert_eq!(cam_from_features(features.view(), &scaled, 8, 8).unwrap(), cam);
    }
}
