use nalgebra::DMatrix;
use proptest::prelude::*;
use rscope_core::attention::{attention_rollout, mean_attention_distance, rank_patches, PatchGrid, RolloutResult};

fn stochastic(t: usize, raw: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(t, t, |i, j| raw[(i * t + j) % raw.len()].abs() + 1e-3);
    for mut r in m.row_iter_mut() {
        let s = r.sum();
        r /= s;
    }
    m
}

fn hand_product(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

#[test]
fn two_uniform_layers_give_thirds() {
    let u = DMatrix::from_element(3, 3, 1.0 / 3.0);
    let r = attention_rollout(&[vec![u.clone()], vec![u]], false, &[0, 1, 2]).unwrap();
    // (0.5 U + 0.5 I)^2 with U the uniform matrix.
    let s = [[2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0], [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0]];
    let want = hand_product(&s, &s);
    for i in 0..3 {
        for j in 0..3 {
            assert!((r.matrix[(i, j)] - want[i][j]).abs() < 1e-9);
        }
    }
    assert!((want[0][0] - 0.5).abs() < 1e-12 && (want[0][1] - 0.25).abs() < 1e-12);
}

#[test]
fn hand_two_layer_product() {
    let a1 = [[0.2, 0.5, 0.3], [0.1, 0.1, 0.8], [0.6, 0.3, 0.1]];
    let a2 = [[1.0, 0.0, 0.0], [0.3, 0.3, 0.4], [0.0, 0.5, 0.5]];
    let adj = |a: &[[f64; 3]; 3]| {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = 0.5 * a[i][j] + if i == j { 0.5 } else { 0.0 };
            }
        }
        out
    };
    let want = hand_product(&adj(&a2), &adj(&a1));
    let m = |a: &[[f64; 3]; 3]| DMatrix::from_fn(3, 3, |i, j| a[i][j]);
    let r = attention_rollout(&[vec![m(&a1)], vec![m(&a2)]], true, &[4, 7]).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert!((r.matrix[(i, j)] - want[i][j]).abs() < 1e-9);
        }
    }
    assert_eq!(r.scores, vec![r.matrix[(0, 1)], r.matrix[(0, 2)]]);
    assert_eq!(r.patch_indices, vec![4, 7]);
}

#[test]
fn permutation_layer() {
    let p = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let r = attention_rollout(&[vec![p.clone()]], false, &[0, 1, 2]).unwrap();
    let want = p * 0.5 + DMatrix::identity(3, 3) * 0.5;
    assert!((r.matrix - want).norm() < 1e-12);
}

#[test]
fn identity_layers_and_ties() {
    let layers: Vec<_> = (0..5).map(|_| vec![DMatrix::identity(4, 4)]).collect();
    let r = attention_rollout(&layers, false, &[0, 1, 2, 3]).unwrap();
    assert!((&r.matrix - DMatrix::identity(4, 4)).norm() < 1e-9);
    assert_eq!(rank_patches(&r), vec![0, 1, 2, 3]);
    assert!(attention_rollout(&[vec![DMatrix::identity(3, 3)], vec![DMatrix::identity(4, 4)]], false, &[0, 1, 2]).is_err());
}

#[test]
fn ranking_hand_case() {
    let r = RolloutResult { matrix: DMatrix::identity(1, 1), scores: vec![0.1, 0.7, 0.2], patch_indices: vec![0, 1, 2], from_cls: false };
    assert_eq!(rank_patches(&r), vec![1, 2, 0]);
    let single = RolloutResult { matrix: DMatrix::identity(1, 1), scores: vec![0.4], patch_indices: vec![0], from_cls: false };
    assert_eq!(rank_patches(&single), vec![0]);
}

#[test]
fn distance_hand_cases() {
    let grid = PatchGrid::new(1, 2, 16);
    let d = mean_attention_distance(&DMatrix::from_element(2, 2, 0.5), &grid, &[0, 1]).unwrap();
    assert_eq!(d, 8.0);
    assert_eq!(mean_attention_distance(&DMatrix::identity(2, 2), &grid, &[0, 1]).unwrap(), 0.0);
    assert_eq!(mean_attention_distance(&DMatrix::identity(1, 1), &grid, &[1]).unwrap(), 0.0);
    assert!(mean_attention_distance(&DMatrix::identity(2, 2), &grid, &[0, 2]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn rollout_stays_row_stochastic(raw in prop::collection::vec(0.0f64..1.0, 16..64), layers in 1usize..13, t in 1usize..8) {
        let stack: Vec<Vec<DMatrix<f64>>> = (0..layers)
            .map(|l| vec![stochastic(t, &raw[l % raw.len()..]), stochastic(t, &raw[(l + 3) % raw.len()..])])
            .collect();
        let idx: Vec<usize> = (0..t).collect();
        let r = attention_rollout(&stack, false, &idx).unwrap();
        for row in r.matrix.row_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn distance_bounded_and_relabel_invariant(raw in prop::collection::vec(0.0f64..1.0, 9..40), seed in 0usize..1000) {
        let grid = PatchGrid::for_image(64, 48, 8).unwrap();
        let t = 1 + raw.len() % 6;
        let a = stochastic(t, &raw);
        let idx: Vec<usize> = (0..t).map(|i| (seed + i * 7) % grid.len()).collect();
        let mut uniq = idx.clone();
        uniq.sort();
        uniq.dedup();
        prop_assume!(uniq.len() == t);
        let d = mean_attention_distance(&a, &grid, &idx).unwrap();
        prop_assert!(d <= grid.diagonal() + 1e-9);
        let perm: Vec<usize> = (0..t).rev().collect();
        let pa = DMatrix::from_fn(t, t, |i, j| a[(perm[i], perm[j])]);
        let pidx: Vec<usize> = perm.iter().map(|&p| idx[p]).collect();
        prop_assert!((mean_attention_distance(&pa, &grid, &pidx).unwrap() - d).abs() < 1e-9);
    }
}
