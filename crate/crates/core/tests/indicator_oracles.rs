use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rscope_core::encoder::EncoderConfig;
use rscope_core::image::synthetic_image;
use rscope_core::indicators::{
    common_features, cosine_alignment, head_mean_vector, mask_invariance_study, mean_drop, membership_threshold,
    retention, top_k_features, FeatureRetention, MagnitudeMode,
};
use rscope_core::stats::compensated_sum;

fn set(v: &[usize]) -> BTreeSet<usize> {
    v.iter().copied().collect()
}

/// Common features by counting each candidate over all images directly.
fn brute_common(sets: &[BTreeSet<usize>], tau: f64) -> BTreeSet<usize> {
    let m = sets.len();
    let universe: BTreeSet<usize> = sets.iter().flatten().copied().collect();
    universe
        .into_iter()
        .filter(|f| {
            let c = sets.iter().filter(|s| s.contains(f)).count();
            // c / m >= tau, up to rounding of tau * m
            (c as f64) >= tau * m as f64 - 1e-9
        })
        .collect()
}

fn brute_top_k(v: &[f64], k: usize) -> BTreeSet<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    for i in 0..idx.len() {
        for j in i + 1..idx.len() {
            let (a, b) = (idx[i], idx[j]);
            if v[b].abs() > v[a].abs() || (v[b].abs() == v[a].abs() && b < a) {
                idx.swap(i, j);
            }
        }
    }
    idx.into_iter().take(k).collect()
}

#[test]
fn threshold_constants() {
    assert_eq!(membership_threshold(50, 0.6), 30);
    assert_eq!(membership_threshold(2, 0.6), 2);
    assert!(common_features(&[set(&[1, 2]), set(&[3, 4])], 0.6).unwrap().is_empty());
    let same = vec![set(&[0, 1, 2]); 5];
    assert_eq!(common_features(&same, 0.6).unwrap().len(), 3);
}

#[test]
fn hand_cases() {
    let v = DVector::from_vec(vec![5.0, -7.0, 1.0, 0.0]);
    assert_eq!(top_k_features(&v, 2, MagnitudeMode::Absolute), set(&[0, 1]));
    assert_eq!(top_k_features(&DVector::from_element(6, 2.0), 3, MagnitudeMode::Absolute), set(&[0, 1, 2]));
    assert_eq!(top_k_features(&v, 9, MagnitudeMode::Absolute).len(), 4);
    assert_eq!(retention(1, 1, &set(&[1, 2, 3]), &set(&[2, 3, 9])).c_pert(), 2);
    let c = cosine_alignment(&DVector::from_vec(vec![3.0, 4.0]), &DVector::from_vec(vec![4.0, 3.0])).unwrap();
    assert!((c.cosine - 24.0 / 25.0).abs() < 1e-15);
}

#[test]
fn head_mean_matches_compensated_sum() {
    let o = DMatrix::from_fn(49, 64, |i, j| ((i * 131 + j * 17) % 97) as f64 * 1e3 - 4.5e4 + 1e-3 * j as f64);
    let v = head_mean_vector(&o).unwrap();
    for j in 0..64 {
        let want = compensated_sum((0..49).map(|i| o[(i, j)])) / 49.0;
        assert!((v[j] - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

#[test]
fn mean_drop_hand_and_missing() {
    let cell = |l, h, drop: usize| {
        let clean: BTreeSet<usize> = (0..6).collect();
        let pert: BTreeSet<usize> = (drop..6).collect();
        retention(l, h, &clean, &pert)
    };
    let half = vec![cell(1, 1, 4), cell(1, 2, 0), cell(2, 1, 4), cell(2, 2, 0)];
    assert_eq!(mean_drop(&half, 2, 2).unwrap(), 2.0);
    let err = mean_drop(&half[..2], 2, 2).unwrap_err().to_string();
    assert!(err.contains("layer 2, head 1") && err.contains("layer 2, head 2"), "{err}");
}

#[test]
fn mask_study_cases() {
    let cfg = EncoderConfig { masking_ratio: 0.0, ..EncoderConfig::desk() };
    let img = synthetic_image(0, 0, 64, 64, 1);
    let r = mask_invariance_study(&cfg, &img, 4, None).unwrap();
    assert_eq!(r.norm_spread(), 0.0);
    assert!(r.min_pairwise_cosine.unwrap() > 1.0 - 1e-12);
    let one = mask_invariance_study(&EncoderConfig::desk(), &img, 1, None).unwrap();
    assert_eq!(one.norm_spread(), 0.0);
    assert!(one.min_pairwise_cosine.is_none());
    let a = mask_invariance_study(&EncoderConfig::desk(), &img, 100, None).unwrap();
    let b = mask_invariance_study(&EncoderConfig::desk(), &img, 100, None).unwrap();
    assert_eq!(a, b);
    assert!(a.norm_spread() > 0.0);
}

fn sets_strategy(images: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<Vec<BTreeSet<usize>>>>> {
    // [image][layer][head] -> top-k set over 8 features
    prop::collection::vec(
        prop::collection::vec(prop::collection::vec(prop::collection::btree_set(0usize..8, 3), 2), 2),
        images,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]
    #[test]
    fn mean_drop_matches_enumeration(clean in sets_strategy(1..4), pert in sets_strategy(1..4), tau in 0.05f64..1.0) {
        let mut cells = Vec::new();
        let mut total = 0usize;
        for l in 0..2 {
            for h in 0..2 {
                let cs: Vec<_> = clean.iter().map(|i| i[l][h].clone()).collect();
                let ps: Vec<_> = pert.iter().map(|i| i[l][h].clone()).collect();
                let bc = brute_common(&cs, tau);
                let bp = brute_common(&ps, tau);
                let c = common_features(&cs, tau).unwrap();
                let p = common_features(&ps, tau).unwrap();
                prop_assert_eq!(&c, &bc);
                prop_assert_eq!(&p, &bp);
                total += bc.len() - bc.intersection(&bp).count();
                let r = retention(l + 1, h + 1, &c, &p);
                prop_assert!(r.c_pert() <= r.c_clean() && r.c_clean() <= 8);
                cells.push(r);
            }
        }
        let d = mean_drop(&cells, 2, 2).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - total as f64 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn top_k_scale_invariant(v in prop::collection::vec(-100.0f64..100.0, 1..20), k in 1usize..10, c in 0.01f64..100.0) {
        let a = DVector::from_vec(v.clone());
        let got = top_k_features(&a, k, MagnitudeMode::Absolute);
        prop_assert_eq!(&got, &brute_top_k(&v, k));
        prop_assert_eq!(got, top_k_features(&(a * c), k, MagnitudeMode::Absolute));
    }

    #[test]
    fn common_monotone_in_tau(sets in prop::collection::vec(prop::collection::btree_set(0usize..10, 0..6), 1..8), t1 in 0.01f64..1.0, t2 in 0.01f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = common_features(&sets, lo).unwrap();
        let b = common_features(&sets, hi).unwrap();
        prop_assert!(b.is_subset(&a));
    }

    #[test]
    fn cosine_scale(v in prop::collection::vec(-10.0f64..10.0, 2..10), c in 0.1f64..10.0) {
        let a = DVector::from_vec(v);
        prop_assume!(a.norm() > 1e-3);
        prop_assert!((cosine_alignment(&a, &(&a * c)).unwrap().cosine - 1.0).abs() < 1e-12);
        prop_assert!((cosine_alignment(&a, &(&a * -c)).unwrap().cosine + 1.0).abs() < 1e-12);
    }

    #[test]
    fn retention_bounded(c in prop::collection::btree_set(0usize..16, 0..10), p in prop::collection::btree_set(0usize..16, 0..10)) {
        let r: FeatureRetention = retention(1, 1, &c, &p);
        prop_assert!(r.c_pert() <= r.c_clean());
        prop_assert!(r.pert_retained.is_subset(&r.clean_common));
    }
}
