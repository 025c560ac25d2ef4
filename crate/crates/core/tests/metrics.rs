use std::collections::BTreeSet;

use proptest::prelude::*;
use rad_core::metrics::{
    accumulate, class_masked_eval, depth_metrics, select_underrepresented, Aggregator, ClassMap, ClassStat, ClassStats,
    MetricsAccumulator,
};
use rad_core::nn::silog_loss;
use rad_core::{DepthMap, SeededRng};
use rand::Rng;

fn random_pair(w: usize, h: usize, rng: &mut SeededRng) -> (DepthMap, DepthMap) {
    let gt: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.2..8.0)).collect();
    let pred: Vec<f64> = gt.iter().map(|g| g * rng.gen_range(0.5..2.0)).collect();
    (
        DepthMap::from_values(w, h, pred).unwrap(),
        DepthMap::from_values(w, h, gt).unwrap(),
    )
}

#[test]
fn two_pixel_hand_evaluation() {
    // pred/gt: 2.2/2.0 and 1.0/1.6.
    let pred = DepthMap::from_values(2, 1, vec![2.2, 1.0]).unwrap();
    let gt = DepthMap::from_values(2, 1, vec![2.0, 1.6]).unwrap();
    let r = depth_metrics(&pred, &gt, &[true, true]).unwrap();
    // Ratios 1.1 and 1.6; only 1.25³ admits the second.
    assert_eq!((r.delta1, r.delta2, r.delta3), (0.5, 0.5, 1.0));
    let abs_rel = (0.2 / 2.0 + 0.6 / 1.6) / 2.0;
    let rms = ((0.04 + 0.36) / 2.0f64).sqrt();
    let rms_log = (((1.1f64).ln().powi(2) + (1.0f64 / 1.6).ln().powi(2)) / 2.0).sqrt();
    let log10 = ((1.1f64).log10().abs() + (1.0f64 / 1.6).log10().abs()) / 2.0;
    assert!((r.abs_rel - abs_rel).abs() < 1e-12);
    assert!((r.rms - rms).abs() < 1e-12);
    assert!((r.rms_log - rms_log).abs() < 1e-12);
    assert!((r.log10 - log10).abs() < 1e-12);
    assert_eq!(r.pixel_count, 2);
}

#[test]
fn invalid_pixels_are_ignored() {
    let pred = DepthMap::from_fn(3, 1, |u, _| (u != 1).then_some(1.0));
    let gt = DepthMap::from_fn(3, 1, |u, _| (u != 2).then_some(1.0));
    assert_eq!(depth_metrics(&pred, &gt, &[true; 3]).unwrap().pixel_count, 1);
}

#[test]
fn all_classes_target_equals_unmasked() {
    let mut rng = SeededRng::new(1);
    let (pred, gt) = random_pair(6, 5, &mut rng);
    let classes = ClassMap::new(6, 5, (0..30).map(|i| i % 4).collect()).unwrap();
    let all = class_masked_eval(&pred, &gt, &classes, &classes.classes()).unwrap().unwrap();
    assert_eq!(all, depth_metrics(&pred, &gt, &[true; 30]).unwrap());
    assert!(class_masked_eval(&pred, &gt, &classes, &BTreeSet::new()).unwrap().is_none());
}

#[test]
fn selection_on_handmade_stats() {
    let stats = ClassStats {
        classes: [(1, 0.05, 6), (2, 0.5, 50), (3, 0.05, 5), (4, 0.099, 100)]
            .into_iter()
            .map(|(c, f, n)| (c, ClassStat { image_frequency: f, occurrence_count: n }))
            .collect(),
        num_images: 1000,
    };
    assert_eq!(select_underrepresented(&stats, 0.1, 5), BTreeSet::from([1, 4]));
}

#[test]
fn per_image_mean_is_secondary_column() {
    let a = DepthMap::from_values(1, 1, vec![2.0]).unwrap();
    let b = DepthMap::from_values(3, 1, vec![1.0, 1.0, 1.0]).unwrap();
    let mut agg = Aggregator::default();
    agg.add(&accumulate(&a.scaled(1.5), &a, &[true]).unwrap());
    agg.add(&accumulate(&b, &b, &[true; 3]).unwrap());
    agg.add(&MetricsAccumulator::default());
    let r = agg.finish().unwrap();
    assert_eq!(r.images, 2);
    assert!((r.pixel_weighted.abs_rel - 0.5 / 4.0).abs() < 1e-15);
    assert!((r.per_image_mean.abs_rel - 0.25).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn class_partition_counts_add_up(seed in 0u64..100_000, k in 1u32..6) {
        let mut rng = SeededRng::new(seed);
        let (pred, gt) = random_pair(7, 4, &mut rng);
        let classes = ClassMap::new(7, 4, (0..28).map(|_| rng.gen_range(0..k)).collect()).unwrap();
        let total: usize = (0..k)
            .filter_map(|c| class_masked_eval(&pred, &gt, &classes, &BTreeSet::from([c])).unwrap())
            .map(|r| r.pixel_count)
            .sum();
        prop_assert_eq!(total, 28);
    }

    #[test]
    fn merged_accumulators_equal_the_union(seed in 0u64..100_000) {
        let mut rng = SeededRng::new(seed);
        let (pred, gt) = random_pair(8, 3, &mut rng);
        let split: Vec<bool> = (0..24).map(|_| rng.gen_bool(0.5)).collect();
        let other: Vec<bool> = split.iter().map(|b| !b).collect();
        let mut merged = accumulate(&pred, &gt, &split).unwrap();
        merged.merge(&accumulate(&pred, &gt, &other).unwrap());
        let whole = depth_metrics(&pred, &gt, &[true; 24]).unwrap();
        let m = merged.report().unwrap();
        prop_assert_eq!(m.pixel_count, whole.pixel_count);
        for c in rad_core::metrics::METRIC_COLUMNS {
            prop_assert!((m.column(c).unwrap() - whole.column(c).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn deltas_are_symmetric_and_ordered(seed in 0u64..100_000) {
        let mut rng = SeededRng::new(seed);
        let (pred, gt) = random_pair(5, 5, &mut rng);
        let a = depth_metrics(&pred, &gt, &[true; 25]).unwrap();
        let b = depth_metrics(&gt, &pred, &[true; 25]).unwrap();
        prop_assert_eq!((a.delta1, a.delta2, a.delta3), (b.delta1, b.delta2, b.delta3));
        prop_assert!(a.delta1 <= a.delta2 && a.delta2 <= a.delta3);
    }

    #[test]
    fn uniform_scale_gives_abs_rel_c_minus_one(seed in 0u64..100_000, c in 1.0f64..3.0) {
        let mut rng = SeededRng::new(seed);
        let (_, gt) = random_pair(4, 4, &mut rng);
        let r = depth_metrics(&gt.scaled(c), &gt, &[true; 16]).unwrap();
        prop_assert!((r.abs_rel - (c - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn silog_is_scale_invariant_at_lambda_one(seed in 0u64..100_000, c in 0.1f64..10.0) {
        let mut rng = SeededRng::new(seed);
        let (pred, gt) = random_pair(6, 6, &mut rng);
        let a = silog_loss(&pred, &gt, 1.0).unwrap();
        let b = silog_loss(&pred.scaled(c), &gt, 1.0).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }
}
