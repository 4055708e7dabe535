use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reflect_tta::metrics::*;
use reflect_tta::LabelMask;

fn mask(h: usize, w: usize, rows: &[&str]) -> LabelMask {
    let data = rows.iter().flat_map(|r| r.bytes().map(|b| b - b'0')).collect();
    LabelMask::new(h, w, data).unwrap()
}

/// Max over both directions of the nearest-pixel distance, by full scan.
fn brute_hausdorff(a: &LabelMask, b: &LabelMask, class: u8) -> f64 {
    let pts = |m: &LabelMask| -> Vec<(f64, f64)> {
        (0..m.height())
            .flat_map(|y| (0..m.width()).map(move |x| (y, x)))
            .filter(|&(y, x)| m.get(y, x) == class)
            .map(|(y, x)| (y as f64, x as f64))
            .collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    if pa.is_empty() && pb.is_empty() {
        return 0.0;
    }
    if pa.is_empty() || pb.is_empty() {
        return f64::INFINITY;
    }
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    directed(&pa, &pb).max(directed(&pb, &pa))
}

fn random_mask(r: &mut ChaCha8Rng, k: u8) -> LabelMask {
    let h = r.random_range(1..12);
    let w = r.random_range(1..12);
    let density = r.random::<f64>();
    let data = (0..h * w)
        .map(|_| if r.random::<f64>() < density { r.random_range(1..k) } else { 0 })
        .collect();
    LabelMask::new(h, w, data).unwrap()
}

#[test]
fn hausdorff_matches_brute_force() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let a = random_mask(&mut r, 3);
        let data = (0..a.height() * a.width()).map(|_| r.random_range(0..3)).collect();
        let b = LabelMask::new(a.height(), a.width(), data).unwrap();
        for class in 1..3 {
            assert_eq!(hausdorff(&a, &b, class).unwrap(), brute_hausdorff(&a, &b, class));
        }
    }
}

#[test]
fn hausdorff_fixtures() {
    let a = mask(3, 5, &["10000", "00000", "00000"]);
    let b = mask(3, 5, &["00000", "00000", "00001"]);
    assert_eq!(hausdorff(&a, &b, 1).unwrap(), 20f64.sqrt());
    assert_eq!(hausdorff(&a, &a, 1).unwrap(), 0.0);
    let empty = LabelMask::filled(3, 5, 0);
    assert_eq!(hausdorff(&empty, &empty, 1).unwrap(), 0.0);
    assert!(hausdorff(&a, &empty, 1).unwrap().is_infinite());
    let all = hausdorff_all(&a, &empty, 3, None).unwrap();
    assert_eq!(all.infinite, 1);
    assert_eq!(all.mean, 0.0);
}

#[test]
fn percentile_variant_is_bounded_by_maximum() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let a = random_mask(&mut r, 2);
        let b = random_mask(&mut r, 2);
        if a.height() != b.height() || a.width() != b.width() {
            continue;
        }
        let full = hausdorff(&a, &b, 1).unwrap();
        let p95 = hausdorff_percentile(&a, &b, 1, 95.0).unwrap();
        assert!(p95 <= full);
    }
}

#[test]
fn dice_fixtures() {
    let a = mask(2, 4, &["1111", "0000"]);
    assert_eq!(dice(&a, &a, 2).unwrap().mean, 1.0);
    let disjoint = mask(2, 4, &["0000", "1111"]);
    assert_eq!(dice(&a, &disjoint, 2).unwrap().mean, 0.0);
    let half = mask(2, 4, &["1100", "0000"]);
    assert_eq!(dice(&a, &half, 2).unwrap().per_class[1], 2.0 * 2.0 / 6.0);
    let three = mask(1, 4, &["0120"]);
    let d = dice(&three, &three, 3).unwrap();
    assert_eq!(d.per_class, vec![1.0, 1.0, 1.0]);
    let absent = mask(1, 4, &["0110"]);
    assert_eq!(dice(&absent, &absent, 3).unwrap().per_class[2], 1.0);
}

#[test]
fn dice_rejects_bad_inputs() {
    let a = mask(1, 3, &["012"]);
    assert!(dice(&a, &a, 2).is_err());
    assert!(dice(&a, &mask(3, 1, &["0", "1", "2"]), 3).is_err());
}

#[test]
fn summary_and_aggregate() {
    let s = Summary::of(&[1.0, 3.0]).unwrap();
    assert_eq!((s.mean, s.std, s.count), (2.0, 1.0, 2));
    assert_eq!(s.display(), "2.0000(1.0000)");
    assert!(Summary::of(&[]).is_none());
    assert_eq!(Summary::of(&[f64::INFINITY, 4.0]).unwrap().mean, 4.0);

    let truth = mask(2, 4, &["1122", "0000"]);
    let good = score("a", &truth, &truth, 3).unwrap();
    let bad = score("b", &mask(2, 4, &["0000", "1122"]), &truth, 3).unwrap();
    let t = aggregate(&[good.clone(), bad]);
    assert_eq!(t.images, 2);
    assert_eq!(t.dice_mean.unwrap().mean, 0.5);
    assert_eq!(t.dice_per_class.len(), 2);
    let csv = metrics_csv(&[good]);
    assert_eq!(csv, "image_id,class,dice,hd\na,1,1.000000,0.000000\na,2,1.000000,0.000000\n");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = random_mask(&mut r, 3);
        let data = (0..a.height() * a.width()).map(|_| r.random_range(0..3)).collect();
        let b = LabelMask::new(a.height(), a.width(), data).unwrap();
        let (ab, ba) = (dice(&a, &b, 3).unwrap(), dice(&b, &a, 3).unwrap());
        prop_assert_eq!(&ab, &ba);
        prop_assert!(ab.per_class.iter().all(|d| (0.0..=1.0).contains(d)));
        prop_assert_eq!(hausdorff(&a, &b, 1).unwrap(), hausdorff(&b, &a, 1).unwrap());
    }
}
