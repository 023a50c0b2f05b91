use mani::data::Mask;
use mani::losses::{bce_loss, dice_loss, jsd_from_scores};
use mani::metrics::{aji, dice_score, extract_instances, panoptic};
use mani::pooling::{masked_max_pool, masked_mean_pool};
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;

fn map_and_mask(max_side: usize) -> impl Strategy<Value = (Array3<f64>, Mask)> {
    (1..4usize, 1..max_side, 1..max_side).prop_flat_map(|(d, h, w)| {
        (
            proptest::collection::vec(-10.0..10.0f64, d * h * w),
            proptest::collection::vec(0..2u8, h * w),
        )
            .prop_map(move |(p, m)| {
                (
                    Array3::from_shape_vec((d, h, w), p).unwrap(),
                    Array2::from_shape_vec((h, w), m).unwrap(),
                )
            })
    })
}

fn instance_map(max_side: usize, max_label: u32) -> impl Strategy<Value = Array2<u32>> {
    (1..max_side, 1..max_side).prop_flat_map(move |(h, w)| {
        proptest::collection::vec(0..=max_label, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
    })
}

/// Two label maps of the same shape.
fn instance_pair(max_side: usize, max_label: u32) -> impl Strategy<Value = (Array2<u32>, Array2<u32>)> {
    (1..max_side, 1..max_side).prop_flat_map(move |(h, w)| {
        let one = move || proptest::collection::vec(0..=max_label, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap());
        (one(), one())
    })
}

/// Reverses the pixel order of every channel, which is a permutation of pixels.
fn reverse_pixels<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(y, x)| a[[h - 1 - y, w - 1 - x]].clone())
}

proptest! {
    #[test]
    fn mean_pool_is_linear((p, mask) in map_and_mask(8), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let q = p.mapv(|v| v.sin());
        let combo = &p * a + &q * b;
        let lhs = masked_mean_pool(&combo.view(), &mask).unwrap();
        let rp = masked_mean_pool(&p.view(), &mask).unwrap();
        let rq = masked_mean_pool(&q.view(), &mask).unwrap();
        match (lhs, rp, rq) {
            (Some(l), Some(x), Some(y)) => {
                for k in 0..l.len() {
                    prop_assert!((l[k] - (a * x[k] + b * y[k])).abs() < 1e-9);
                }
            }
            (None, None, None) => prop_assert!(mask.iter().all(|&m| m == 0)),
            _ => prop_assert!(false, "inconsistent emptiness"),
        }
    }

    #[test]
    fn pooling_ignores_pixel_order((p, mask) in map_and_mask(8)) {
        let (d, h, w) = p.dim();
        let rp = Array3::from_shape_fn((d, h, w), |(k, y, x)| p[[k, h - 1 - y, w - 1 - x]]);
        let rm = reverse_pixels(&mask);
        let close = |a: Option<Array1<f64>>, b: Option<Array1<f64>>| match (a, b) {
            (Some(a), Some(b)) => a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-9),
            (None, None) => true,
            _ => false,
        };
        prop_assert!(close(masked_mean_pool(&p.view(), &mask).unwrap(), masked_mean_pool(&rp.view(), &rm).unwrap()));
        prop_assert!(close(masked_max_pool(&p.view(), &mask).unwrap(), masked_max_pool(&rp.view(), &rm).unwrap()));
    }

    #[test]
    fn losses_ignore_pixel_order((p, mask) in map_and_mask(8)) {
        let logits = p.index_axis(ndarray::Axis(0), 0).to_owned();
        let probs = logits.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let (rl, rpb, rm) = (reverse_pixels(&logits), reverse_pixels(&probs), reverse_pixels(&mask));
        prop_assert!((bce_loss(&logits.view(), &mask).unwrap() - bce_loss(&rl.view(), &rm).unwrap()).abs() < 1e-9);
        prop_assert!((dice_loss(&probs.view(), &mask).unwrap() - dice_loss(&rpb.view(), &rm).unwrap()).abs() < 1e-9);
        let d = dice_loss(&probs.view(), &mask).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn jsd_never_exceeds_zero(scores in proptest::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 1..20)) {
        let pos = Array1::from_iter(scores.iter().map(|s| s.0));
        let neg = Array1::from_iter(scores.iter().map(|s| s.1));
        let (v, _, _) = jsd_from_scores(&pos, &neg).unwrap();
        prop_assert!(v <= 0.0);
    }

    #[test]
    fn panoptic_is_invariant_under_relabeling((gt, pred) in instance_pair(12, 5), shift in 1u32..50) {
        let relabeled = pred.mapv(|v| if v == 0 { 0 } else { (v + shift) * 3 });
        let a = panoptic(&gt, &pred).unwrap();
        let b = panoptic(&gt, &relabeled).unwrap();
        prop_assert!((a.pq - b.pq).abs() < 1e-12 && (a.dq - b.dq).abs() < 1e-12);
        prop_assert!((a.pq - a.dq * a.sq).abs() < 1e-12);
    }

    #[test]
    fn metrics_stay_in_unit_interval((gt, pred) in instance_pair(12, 4)) {
        let a = aji(&gt, &pred).unwrap();
        let d = dice_score(&gt.mapv(|v| u8::from(v > 0)), &pred.mapv(|v| u8::from(v > 0))).unwrap();
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&d));
    }

    #[test]
    fn dice_is_symmetric_and_order_free((a, b) in instance_pair(10, 1)) {
        let (ma, mb) = (a.mapv(|v| v as u8), b.mapv(|v| v as u8));
        let d = dice_score(&ma, &mb).unwrap();
        prop_assert_eq!(d, dice_score(&mb, &ma).unwrap());
        prop_assert!((d - dice_score(&reverse_pixels(&ma), &reverse_pixels(&mb)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn instance_extraction_labels_every_pixel_once(m in instance_map(14, 1)) {
        let mask = m.mapv(|v| v as u8);
        let inst = extract_instances(&mask);
        let k = inst.iter().copied().max().unwrap_or(0);
        for (&mv, &iv) in mask.iter().zip(inst.iter()) {
            prop_assert_eq!(mv > 0, iv > 0);
        }
        for label in 1..=k {
            prop_assert!(inst.iter().any(|&v| v == label));
        }
        // Component count is invariant under a half-turn.
        let rotated = extract_instances(&reverse_pixels(&mask));
        prop_assert_eq!(rotated.iter().copied().max().unwrap_or(0), k);
    }
}
