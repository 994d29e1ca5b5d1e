//! Property tests for invariants that hold for any input.

use ndarray::Array1;
use proptest::collection::vec;
use proptest::prelude::*;

use sonospine::completion::learned::gaussian_kl;
use sonospine::completion::{extract_level_with_context, fit_rigid};
use sonospine::compounding::{compound_points, farthest_point_indices};
use sonospine::metrics::{chamfer, emd, f1_at_threshold, hungarian};
use sonospine::{LabeledPointCloud, RigidTransform, Vec3};

fn point() -> impl Strategy<Value = Vec3> {
    (-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn cloud(min: usize, max: usize) -> impl Strategy<Value = Vec<Vec3>> {
    vec(point(), min..max)
}

fn rotation() -> impl Strategy<Value = RigidTransform> {
    (point(), -3.1..3.1f64, point()).prop_filter_map("axis", |(axis, angle, t)| {
        (axis.norm() > 1e-3).then(|| RigidTransform::from_axis_angle(&axis.normalize(), angle).with_translation(t))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chamfer_is_symmetric_and_zero_on_self(a in cloud(2, 40), b in cloud(2, 40)) {
        prop_assert_eq!(chamfer(&a, &a, false).unwrap(), 0.0);
        let ab = chamfer(&a, &b, false).unwrap();
        let ba = chamfer(&b, &a, false).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
    }

    #[test]
    fn emd_of_a_permutation_is_zero(a in cloud(1, 30), seed in any::<u64>()) {
        let mut b = a.clone();
        let k = (seed as usize) % b.len();
        b.rotate_left(k);
        prop_assert!(emd(&a, &b, false, 64, 0).unwrap() < 1e-9);
    }

    #[test]
    fn hungarian_returns_a_permutation_no_worse_than_identity(cost in vec(0.0..10.0f64, 36)) {
        let n = 6;
        let assign = hungarian(&cost, n);
        let mut seen = assign.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        let identity: f64 = (0..n).map(|i| cost[i * n + i]).sum();
        prop_assert!(total <= identity + 1e-12);
    }

    #[test]
    fn f1_grows_with_threshold(a in cloud(1, 30), b in cloud(1, 30), t in 0.1..20.0f64) {
        let lo = f1_at_threshold(&a, &b, t).unwrap().f1;
        let hi = f1_at_threshold(&a, &b, 2.0 * t).unwrap().f1;
        prop_assert!(hi >= lo);
    }

    #[test]
    fn fps_is_distinct_and_prefix_stable(pts in cloud(10, 80), seed in any::<u64>()) {
        let n = pts.len() / 2;
        let short = farthest_point_indices(&pts, n, seed).unwrap();
        let long = farthest_point_indices(&pts, pts.len(), seed).unwrap();
        prop_assert_eq!(&long[..n], &short[..]);
        let mut sorted = long.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..pts.len()).collect::<Vec<_>>());
    }

    #[test]
    fn compounding_ignores_frame_order(frames in vec(cloud(0, 20), 1..6), shift in 0usize..6) {
        let mut shuffled = frames.clone();
        let k = shift % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.iter_mut().for_each(|f| f.reverse());
        prop_assert_eq!(compound_points(&frames, 1.5).unwrap(), compound_points(&shuffled, 1.5).unwrap());
    }

    #[test]
    fn fit_rigid_recovers_the_motion(src in cloud(4, 30), t in rotation()) {
        let (lo, hi) = src.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), p| (lo.min(p.norm()), hi.max(p.norm())));
        prop_assume!(hi - lo > 1.0);
        let dst: Vec<Vec3> = src.iter().map(|p| t.apply(p)).collect();
        let fit = fit_rigid(&src, &dst);
        for (p, q) in src.iter().zip(&dst) {
            prop_assert!((fit.apply(p) - q).norm() < 1e-6);
        }
    }

    #[test]
    fn kl_is_nonnegative(v in vec(-4.0..4.0f64, 20)) {
        let part = |k: usize| Array1::from(v[k * 5..k * 5 + 5].to_vec());
        let (mp, lp, mc, lc) = (part(0), part(1), part(2), part(3));
        prop_assert!(gaussian_kl(&mp, &lp, &mc, &lc) >= 0.0);
        prop_assert_eq!(gaussian_kl(&mp, &lp, &mp, &lp), 0.0);
    }

    #[test]
    fn observation_normalization_round_trips(
        pts in cloud(2, 40),
        labels in vec(1u8..=5, 40),
        margin in 0.0..1.0f64,
    ) {
        let labels = labels[..pts.len()].to_vec();
        let level = labels[0];
        let c = LabeledPointCloud::new(pts.clone(), labels).unwrap();
        let Ok(obs) = extract_level_with_context(&c, level, margin) else {
            // a single target point has no extent to normalize by
            return Ok(());
        };
        for (p, q) in obs.target.iter().zip(obs.normalized_target()) {
            prop_assert!((obs.denormalize(&q) - p).norm() < 1e-9);
        }
        for q in obs.normalized_target() {
            prop_assert!(q.amax() <= 0.5 + 1e-9);
        }
    }
}
