mod common;

use almrr::frm::AnomalyMap;
use almrr::metrics::{self, auroc, average_precision, image_score, CategoryAccumulator, ImageScoreRule};
use common::*;
use proptest::prelude::*;

#[test]
fn auroc_and_ap_match_oracles_with_ties() {
    for seed in 0..50 {
        let (s, l) = metric_instance(seed);
        let a = auroc(&s, &l).unwrap();
        let p = average_precision(&s, &l).unwrap();
        assert!((a - auroc_pairwise(&s, &l)).abs() < 1e-12, "seed {seed}");
        assert!((p - ap_sweep(&s, &l)).abs() < 1e-12, "seed {seed}");
    }
}

#[test]
fn auroc_is_antisymmetric_without_ties() {
    let (s, l) = metric_instance(1);
    let neg: Vec<f64> = s.iter().map(|v| -v).collect();
    let a = auroc(&s, &l).unwrap();
    assert!((a + auroc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn single_class_is_undefined() {
    assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    assert!(average_precision(&[0.1, 0.2], &[false, false]).is_err());
    assert!(auroc(&[0.1, f64::NAN], &[true, false]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn metrics_invariant_under_monotone_transforms(seed in 0u64..500, scale in 0.1f64..10.0, shift in -5f64..5.0) {
        let (s, l) = metric_instance(seed);
        let t: Vec<f64> = s.iter().map(|v| (v * scale + shift).exp()).collect();
        prop_assert!((auroc(&s, &l).unwrap() - auroc(&t, &l).unwrap()).abs() < 1e-12);
        prop_assert!((average_precision(&s, &l).unwrap() - average_precision(&t, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metrics_lie_in_unit_interval(scores in proptest::collection::vec(0u8..6, 2..60), flips in proptest::collection::vec(any::<bool>(), 60)) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let mut l: Vec<bool> = flips[..s.len()].to_vec();
        l[0] = true;
        l[1] = false;
        let a = auroc(&s, &l).unwrap();
        let p = average_precision(&s, &l).unwrap();
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&p));
        prop_assert!((a - auroc_pairwise(&s, &l)).abs() < 1e-12);
    }
}

fn map(scores: Vec<f64>) -> AnomalyMap {
    AnomalyMap::new(1, scores.len(), scores, "m").unwrap()
}

#[test]
fn image_scores() {
    let m = map(vec![0.1, 0.9, 0.4, 0.6]);
    assert_eq!(image_score(&m, ImageScoreRule::Max), 0.9);
    assert!((image_score(&m, ImageScoreRule::TopKMean(2)) - 0.75).abs() < 1e-15);
    assert!((image_score(&m, ImageScoreRule::TopKMean(10)) - 0.5).abs() < 1e-15);
}

#[test]
fn accumulator_pools_pixels_across_images() {
    let mut acc = CategoryAccumulator::new("c", ImageScoreRule::Max);
    acc.push(&map(vec![0.1, 0.2]), false, None).unwrap();
    acc.push(&map(vec![0.3, 0.9]), true, Some(&[0, 255])).unwrap();
    acc.push(&map(vec![0.5, 0.5]), true, None).unwrap();
    assert!(acc.push(&map(vec![0.5, 0.5]), true, Some(&[1])).is_err());
    let r = acc.finish().unwrap();
    assert_eq!((r.n_images, r.skipped), (2, 1));
    assert_eq!(r.image_auroc, 1.0);
    let pooled = [0.1, 0.2, 0.3, 0.9];
    let labels = [false, false, false, true];
    assert_eq!(r.pixel_auroc, auroc_pairwise(&pooled, &labels));
    assert_eq!(r.pixel_ap, ap_sweep(&pooled, &labels));
}

#[test]
fn report_rendering_and_average() {
    let mk = |c: &str, v: f64| metrics::CategoryReport { category: c.into(), image_auroc: v, pixel_auroc: v, pixel_ap: v / 2.0, n_images: 10, skipped: 0 };
    let rows = vec![mk("a", 0.8), mk("b", 1.0)];
    let avg = metrics::average_row(&rows).unwrap();
    assert_eq!(avg.category, "avg");
    assert!((avg.pixel_auroc - 0.9).abs() < 1e-15);
    assert_eq!(avg.n_images, 20);
    let csv = metrics::to_csv(&rows);
    assert_eq!(csv.lines().next().unwrap(), "category,image_auroc,pixel_auroc,pixel_ap,n_images");
    assert_eq!(csv.lines().nth(2).unwrap(), "b,1.000000,1.000000,0.500000,10");
    assert!(metrics::to_table(&rows).contains("0.8000"));
    assert!(metrics::average_row(&[]).is_none());
}
