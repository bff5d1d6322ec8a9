mod common;

use colde::objectives::{
    depth_consistency, evaluate, normal_consistency, total_loss, LossWeights,
};
use colde::ssim::{ssim, DEFAULT_C1, DEFAULT_C2};
use colde::PoseSE3;
use common::Instance;
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

fn unit_vector() -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-1.0f64..1.0)
        .prop_filter("non-degenerate", |v| Vector3::from(*v).norm() > 1e-3)
        .prop_map(|v| Vector3::from(v).normalize())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_maps_are_finite_and_non_negative_on_the_mask(seed in 0u64..10_000, channel in 0usize..64) {
        let inst = Instance::random(seed, 14, 18);
        let ev = evaluate(&inst.pair(channel), &LossWeights::default(), None).unwrap();
        for p in 0..14 * 18 {
            if ev.masks.combined.data[p] {
                for map in [&ev.photo_map, &ev.feat_map, &ev.depth_map, &ev.norm_map] {
                    prop_assert!(map.data[p].is_finite() && map.data[p] >= 0.0);
                }
            }
        }
        prop_assert!(ev.breakdown.total.is_finite());
    }

    #[test]
    fn breakdown_recomposes_to_total(seed in 0u64..10_000, channel in 0usize..64) {
        let inst = Instance::random(seed, 12, 12);
        let w = LossWeights::default();
        let b = total_loss(&inst.pair(channel), &w).unwrap();
        prop_assert!((b.recompose(&w) - b.total).abs() <= 1e-12);
    }

    #[test]
    fn raising_any_weight_raises_the_total(seed in 0u64..10_000, which in 0usize..5, bump in 0.01f64..1.0) {
        let inst = Instance::random(seed, 12, 12);
        let w = LossWeights::default();
        let pair = inst.pair(3);
        let base = total_loss(&pair, &w).unwrap();
        prop_assume!(!base.empty_mask);
        let parts = [base.feat, base.depth, base.norm, base.orth, base.smooth];
        prop_assume!(parts.iter().all(|&v| v > 0.0));
        let mut heavier = w;
        *[
            &mut heavier.lambda1,
            &mut heavier.lambda2,
            &mut heavier.lambda3,
            &mut heavier.lambda4,
            &mut heavier.lambda5,
        ][which] += bump;
        // Masks do not depend on the lambdas, so the comparison is like for like.
        prop_assert!(total_loss(&pair, &heavier).unwrap().total > base.total);
    }

    #[test]
    fn depth_consistency_is_symmetric_and_scale_free(
        a in 1e-3f64..100.0, b in 1e-3f64..100.0, s in 1e-2f64..100.0
    ) {
        let v = depth_consistency(a, b);
        prop_assert!((0.0..1.0).contains(&v));
        prop_assert_eq!(v, depth_consistency(b, a));
        prop_assert!((depth_consistency(s * a, s * b) - v).abs() < 1e-12);
    }

    #[test]
    fn normal_difference_is_rotation_invariant_in_two_norm(
        a in unit_vector(), b in unit_vector(), axis in unit_vector(), angle in -3.1f64..3.1
    ) {
        let q = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        prop_assert!(((q * a - q * b).norm() - (a - b).norm()).abs() < 1e-12);
        let l1 = normal_consistency(&a, &b);
        prop_assert!((l1 - (a - b).abs().sum()).abs() < 1e-15);
        prop_assert!(l1 >= (a - b).norm() - 1e-15);
    }

    #[test]
    fn ssim_stays_in_range(seed in 0u64..10_000) {
        let mut r = common::rng(seed);
        let a = common::random_image(&mut r, 9, 11, 3);
        let b = common::random_image(&mut r, 9, 11, 3);
        let map = ssim(&a, &b, DEFAULT_C1, DEFAULT_C2).unwrap();
        prop_assert!(map.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn rotation_only_transport_ignores_translation() {
    let inst = Instance::random(4, 12, 12);
    let w = LossWeights::default();
    let ev = evaluate(&inst.pair(0), &w, None).unwrap();
    let shifted = PoseSE3::new(inst.pose.rotation, inst.pose.translation * 1.01).unwrap();
    let pair = colde::FramePair {
        pose_t_to_s: shifted,
        ..inst.pair(0)
    };
    let ev2 = evaluate(&pair, &w, None).unwrap();
    assert_eq!(ev.rotated_normals, ev2.rotated_normals);
}
