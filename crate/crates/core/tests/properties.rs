use proptest::prelude::*;

use ren::eval::{self, default_thresholds};
use ren::preprocess::{denormalize_joints, normalize_joints, CameraIntrinsics, CropResult, HandAnnotation};
use ren::train::{lr_schedule, TrainConfig};

fn point() -> impl Strategy<Value = [f64; 3]> {
    [-200.0..200.0f64, -200.0..200.0f64, 200.0..800.0f64]
}

fn frames(joints: usize) -> impl Strategy<Value = Vec<(HandAnnotation, HandAnnotation)>> {
    let hand = move || prop::collection::vec(point(), joints).prop_map(|joints| HandAnnotation { joints });
    prop::collection::vec((hand(), hand()), 1..12)
}

fn split(pairs: &[(HandAnnotation, HandAnnotation)]) -> (Vec<HandAnnotation>, Vec<HandAnnotation>) {
    pairs.iter().cloned().unzip()
}

proptest! {
    #[test]
    fn projection_round_trips(p in point()) {
        let cam = CameraIntrinsics::new(241.42, 241.42, 160.0, 120.0).unwrap();
        let [u, v, d] = cam.world_to_image(p).unwrap();
        let back = cam.image_to_world(u, v, d).unwrap();
        for a in 0..3 {
            prop_assert!((back[a] - p[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn joint_normalization_round_trips(
        joints in prop::collection::vec(point(), 1..20),
        centroid in point(),
        cube in 50.0..300.0f64,
        scale in 0.8..1.2f64,
        rotation in -180.0..180.0f64,
    ) {
        let crop = CropResult { patch: vec![0.0; 4], size: 2, centroid, cube_size: cube, rotation_deg: rotation, scale };
        let ann = HandAnnotation { joints };
        let back = denormalize_joints(&normalize_joints(&ann, &crop).values, &crop);
        for (p, q) in ann.joints.iter().zip(&back.joints) {
            for a in 0..3 {
                prop_assert!((p[a] - q[a]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn mean_error_ignores_frame_order(pairs in frames(4), rot in 0usize..12) {
        let (p, g) = split(&pairs);
        let mut shuffled = pairs.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        let (ps, gs) = split(&shuffled);
        let a = eval::mean_joint_error(&p, &g).unwrap();
        let b = eval::mean_joint_error(&ps, &gs).unwrap();
        prop_assert!((a.mean - b.mean).abs() < 1e-9);
        prop_assert!(a.mean >= 0.0);
    }

    #[test]
    fn success_curve_is_a_monotone_fraction(pairs in frames(3)) {
        let (p, g) = split(&pairs);
        let curve = eval::success_curve(&p, &g, &default_thresholds()).unwrap();
        for w in curve.windows(2) {
            prop_assert!(w[0].fraction <= w[1].fraction);
        }
        for c in &curve {
            prop_assert!((0.0..=1.0).contains(&c.fraction));
        }
        let worst = eval::frame_max_errors(&p, &g).unwrap().into_iter().fold(0.0, f64::max);
        let all = eval::success_rate(&p, &g, worst + 1e-6).unwrap();
        prop_assert_eq!(all, 1.0);
    }

    #[test]
    fn perfect_predictions_score_zero(pairs in frames(5)) {
        let (_, g) = split(&pairs);
        let e = eval::mean_joint_error(&g, &g).unwrap();
        prop_assert_eq!(e.mean, 0.0);
        prop_assert_eq!(eval::success_rate(&g, &g, 1e-3).unwrap(), 1.0);
    }

    #[test]
    fn learning_rate_never_increases(a in 0usize..400_000, b in 0usize..400_000) {
        let cfg = TrainConfig::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(lr_schedule(hi, &cfg) <= lr_schedule(lo, &cfg));
        prop_assert!(lr_schedule(lo, &cfg) <= cfg.lr0);
    }

    #[test]
    fn improvement_truncates_toward_zero(base in 1.0..50.0f64, value in 1.0..50.0f64) {
        let pct = eval::relative_improvement(base, value);
        let exact = (base - value) / base * 100.0;
        prop_assert!(pct.abs() <= exact.abs() + 1e-6);
        prop_assert!(exact.abs() - pct.abs() < 0.01 + 1e-6);
        prop_assert!(pct == 0.0 || (pct > 0.0) == (exact > 0.0));
    }

    #[test]
    fn timing_percentiles_are_ordered(samples in prop::collection::vec(0.01..100.0f64, 1..50)) {
        let t = eval::timing_stats(1, &samples).unwrap();
        let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = samples.iter().cloned().fold(0.0, f64::max);
        prop_assert!(min <= t.p50_ms && t.p50_ms <= t.p95_ms && t.p95_ms <= max);
        prop_assert!(min <= t.mean_ms && t.mean_ms <= max + 1e-9);
    }
}
