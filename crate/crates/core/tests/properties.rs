use partasm::data::{split_ids, synth_object, Category};
use partasm::geom::{
    apply_pose, canonicalize, chamfer, farthest_point_sample, PartCloud, Point3, Pose,
};
use partasm::knowledge::{group_by_symmetry, rotary_rotate, RotaryConfig};
use partasm::metrics::{evaluate_object, MetricConfig};
use partasm::objective::{match_groups, total_loss, LossWeights, Matching};
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Point3> {
    [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64]
}

fn cloud(max: usize) -> impl Strategy<Value = PartCloud> {
    prop::collection::vec(point(), 1..max).prop_map(|p| PartCloud::new(p).unwrap())
}

fn pose() -> impl Strategy<Value = Pose> {
    (
        [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64],
        point(),
    )
        .prop_filter("nonzero quaternion", |(q, _)| {
            q.iter().map(|c| c * c).sum::<f64>() > 1e-2
        })
        .prop_map(|(q, t)| Pose::from_raw(q, t))
}

fn kind() -> impl Strategy<Value = Category> {
    prop_oneof![
        Just(Category::Table),
        Just(Category::Chair),
        Just(Category::Shelf)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chamfer_is_symmetric_and_zero_on_self(a in cloud(40), b in cloud(40)) {
        prop_assert_eq!(chamfer(&a, &b), chamfer(&b, &a));
        prop_assert_eq!(chamfer(&a, &a), 0.0);
        prop_assert!(chamfer(&a, &b) >= 0.0);
    }

    #[test]
    fn chamfer_is_rigid_invariant(a in cloud(40), b in cloud(40), p in pose()) {
        let pa = apply_pose(&p, &a).unwrap();
        let pb = apply_pose(&p, &b).unwrap();
        prop_assert!((chamfer(&a, &b) - chamfer(&pa, &pb)).abs() < 1e-6);
    }

    #[test]
    fn quaternion_double_cover(c in cloud(30), p in pose()) {
        let neg = Pose { rotation: p.rotation.map(|x| -x), translation: p.translation };
        let a = apply_pose(&p, &c).unwrap();
        let b = apply_pose(&neg, &c).unwrap();
        for (x, y) in a.points().iter().zip(b.points()) {
            for k in 0..3 {
                prop_assert!((x[k] - y[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn canonicalize_is_idempotent(c in cloud(60)) {
        let (once, _) = canonicalize(&c);
        let (twice, _) = canonicalize(&once);
        for (x, y) in once.points().iter().zip(twice.points()) {
            for k in 0..3 {
                prop_assert!((x[k] - y[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fps_is_deterministic(c in cloud(60), k in 1usize..10, start in 0usize..60) {
        let k = k.min(c.len());
        let start = start % c.len();
        let a = farthest_point_sample(&c, k, start).unwrap();
        prop_assert_eq!(&a, &farthest_point_sample(&c, k, start).unwrap());
        prop_assert_eq!(a[0], start);
    }

    #[test]
    fn rotary_depends_on_offset_only(
        q in prop::collection::vec(-1.0..1.0f64, 16),
        k in prop::collection::vec(-1.0..1.0f64, 16),
        i in 0usize..60, j in 0usize..60, shift in 0usize..60,
    ) {
        let cfg = RotaryConfig::new(16).unwrap();
        let dot = |a: usize, b: usize| -> f64 {
            let x = rotary_rotate(&q, a, &cfg).unwrap();
            let y = rotary_rotate(&k, b, &cfg).unwrap();
            x.iter().zip(&y).map(|(u, v)| u * v).sum()
        };
        prop_assert!((dot(i, j) - dot(i + shift, j + shift)).abs() < 1e-6);
    }

    #[test]
    fn grouping_survives_rigid_motion_of_parts(k in kind(), seed in 0u64..500, p in pose()) {
        let task = synth_object(k, seed);
        let moved: Vec<PartCloud> = task.parts.iter().map(|c| apply_pose(&p, c).unwrap()).collect();
        prop_assert_eq!(group_by_symmetry(&moved, 0.02), task.grouping.clone());
    }

    #[test]
    fn matching_never_increases_cost(k in kind(), seed in 0u64..500, noise in prop::collection::vec(pose(), 20)) {
        let task = synth_object(k, seed);
        let pred: Vec<Pose> = task.gt.iter().zip(&noise).map(|(g, n)| Pose::from_raw(n.rotation, [0, 1, 2].map(|a| g.translation[a] + 0.1 * n.translation[a]))).collect();
        let m = match_groups(&pred, &task.parts, &task.gt, &task.grouping);
        let cost = |m: &Matching| -> f64 {
            (0..pred.len())
                .map(|i| chamfer(&apply_pose(&pred[i], &task.parts[i]).unwrap(), &apply_pose(&task.gt[m.gt_for(i)], &task.parts[i]).unwrap()))
                .sum()
        };
        prop_assert!(cost(&m) <= cost(&Matching::identity(pred.len())) + 1e-12);
    }

    #[test]
    fn loss_is_zero_on_gt_and_invariant_to_group_relabeling(k in kind(), seed in 0u64..500, noise in prop::collection::vec(pose(), 20)) {
        let task = synth_object(k, seed);
        let w = LossWeights::default();
        prop_assert_eq!(total_loss(&task.gt, &task.gt, &task.parts, &task.grouping, &w).total, 0.0);
        let pred: Vec<Pose> = task.gt.iter().zip(&noise).map(|(g, n)| Pose::from_raw(g.rotation, [0, 1, 2].map(|a| g.translation[a] + 0.05 * n.translation[a]))).collect();
        let mut relabeled = task.gt.clone();
        for members in task.grouping.groups() {
            for (a, b) in members.iter().zip(members.iter().rev()) {
                relabeled[*a] = task.gt[*b];
            }
        }
        let l1 = total_loss(&pred, &task.gt, &task.parts, &task.grouping, &w).total;
        let l2 = total_loss(&pred, &relabeled, &task.parts, &task.grouping, &w).total;
        prop_assert!((l1 - l2).abs() <= 1e-9 * l1.max(1.0));
    }

    #[test]
    fn metrics_respect_group_permutation_and_success(k in kind(), seed in 0u64..500, noise in prop::collection::vec(pose(), 20), scale in 0.0..0.2f64) {
        let task = synth_object(k, seed);
        let cfg = MetricConfig::default();
        let pred: Vec<Pose> = task.gt.iter().zip(&noise).map(|(g, n)| Pose::from_raw(g.rotation, [0, 1, 2].map(|a| g.translation[a] + scale * n.translation[a]))).collect();
        let mut swapped = pred.clone();
        for members in task.grouping.groups() {
            for (a, b) in members.iter().zip(members.iter().rev()) {
                swapped[*a] = pred[*b];
            }
        }
        let eval = |p: &[Pose]| evaluate_object(&task.id, &task.category, &task.parts, &task.gt, p, &task.grouping, &task.contacts, &cfg);
        let (r1, r2) = (eval(&pred), eval(&swapped));
        prop_assert_eq!(r1.pa_correct, r2.pa_correct);
        prop_assert_eq!(r1.ca_correct, r2.ca_correct);
        prop_assert!((r1.scd - r2.scd).abs() <= 1e-9 * r1.scd.max(1.0));
        if r1.sr == 1 {
            prop_assert_eq!(r1.pa, 1.0);
        }
    }

    #[test]
    fn displacing_a_part_further_never_fixes_it(k in kind(), seed in 0u64..500, dir in point(), a in 0.0..0.3f64, b in 0.0..0.3f64) {
        let task = synth_object(k, seed);
        let cfg = MetricConfig::default();
        let (near, far) = if a <= b { (a, b) } else { (b, a) };
        let shifted = |d: f64| {
            let mut p = task.gt.clone();
            p[0].translation = [0, 1, 2].map(|x| p[0].translation[x] + d * dir[x]);
            p
        };
        let flag = |p: &[Pose]| partasm::metrics::metric_pa_strict(p, &task.gt, &task.parts, cfg.epsilon).flags[0];
        prop_assert!(flag(&shifted(near)) || !flag(&shifted(far)));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_stable(n in 1usize..200, seed in 0u64..50) {
        let ids: Vec<String> = (0..n).map(|i| format!("obj{i}")).collect();
        let s = split_ids(&ids, seed);
        let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort();
        let mut want = ids.clone();
        want.sort();
        prop_assert_eq!(all, want);
        let mut reversed = ids.clone();
        reversed.reverse();
        prop_assert_eq!(split_ids(&reversed, seed), s);
    }
}
