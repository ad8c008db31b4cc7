use nalgebra::DMatrix;
use proptest::prelude::*;
use rscope_core::encoder::{head_output, mask_select, patchify, visible_count, ActivationTrace, EncoderConfig, ToyEncoder};
use rscope_core::image::{synthetic_image, Image};
use rscope_core::stats::compensated_sum;

fn small(include_cls: bool) -> EncoderConfig {
    EncoderConfig {
        image_height: 32,
        image_width: 32,
        patch_size: 8,
        embed_dim: 24,
        num_layers: 3,
        num_heads: 3,
        masking_ratio: 0.5,
        seed: 17,
        mask_seed: 5,
        include_cls,
    }
}

fn matmul(a: &[Vec<f64>], b: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| (0..b.ncols()).map(|j| row.iter().enumerate().map(|(k, v)| v * b[(k, j)]).sum()).collect())
        .collect()
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn norm_rows(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            r.iter().map(|v| (v - mu) / (var + 1e-6).sqrt()).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn paper_preset_shapes() {
    let cfg = EncoderConfig::vit_base();
    assert_eq!(cfg.num_patches(), 196);
    assert_eq!(cfg.num_visible(), 49);
    assert_eq!(cfg.head_dim(), 64);
    let img = synthetic_image(0, 0, 224, 224, 1);
    let trace = ToyEncoder::new(cfg).unwrap().forward(&img).unwrap();
    assert_eq!(trace.num_layers(), 12);
    for layer in &trace.layers {
        assert_eq!(layer.tokens.shape(), (50, 768));
        assert_eq!(layer.heads.len(), 12);
        for h in &layer.heads {
            assert_eq!(h.attention.shape(), (50, 50));
            assert_eq!(h.values.shape(), (50, 64));
        }
    }
    assert_eq!(trace.visible_indices.len(), 49);
}

#[test]
fn patchify_counts() {
    assert_eq!(patchify(&Image::filled(224, 224, 3, 0.0), 16).unwrap().len(), 196);
    let one = synthetic_image(1, 1, 16, 16, 0);
    assert_eq!(patchify(&one, 16).unwrap(), vec![one.data().to_vec()]);
    let four = patchify(&Image::filled(32, 32, 3, 9.0), 16).unwrap();
    assert!(four.iter().all(|p| p == &four[0]));
    assert!(patchify(&Image::filled(30, 32, 3, 0.0), 16).is_err());
}

#[test]
fn mask_counts_and_reproducibility() {
    assert_eq!(visible_count(196, 0.75), 49);
    assert_eq!(mask_select(10, 0.0, 3), (0..10).collect::<Vec<_>>());
    let a = mask_select(4, 0.75, 99);
    assert_eq!(a.len(), 1);
    assert_eq!(a, mask_select(4, 0.75, 99));
}

#[test]
fn single_token_attention_is_one() {
    let cfg = EncoderConfig { masking_ratio: 0.0, image_height: 8, image_width: 8, include_cls: false, ..small(false) };
    let t = ToyEncoder::new(cfg).unwrap().forward(&synthetic_image(0, 0, 8, 8, 2)).unwrap();
    for l in &t.layers {
        for h in &l.heads {
            assert_eq!(h.attention, DMatrix::from_element(1, 1, 1.0));
        }
    }
}

/// Rebuilds every layer output from the traced attention and values using
/// plain loops and the block weights.
fn recompute_check(enc: &ToyEncoder, img: &Image, trace: &ActivationTrace) {
    let cfg = enc.config();
    let mut x = rows(&enc.embed(img, &trace.visible_indices).unwrap());
    let dh = cfg.head_dim();
    for (li, layer) in trace.layers.iter().enumerate() {
        let w = enc.block_weights(li + 1);
        let mut concat = vec![vec![0.0; cfg.embed_dim]; x.len()];
        for (h, head) in layer.heads.iter().enumerate() {
            for (i, row) in concat.iter_mut().enumerate() {
                let s: f64 = (0..x.len()).map(|j| head.attention[(i, j)]).sum();
                assert!((s - 1.0).abs() < 1e-6);
                for c in 0..dh {
                    row[h * dh + c] = (0..x.len()).map(|j| head.attention[(i, j)] * head.values[(j, c)]).sum();
                }
            }
            let o = head_output(&head.attention, &head.values).unwrap();
            for i in 0..x.len() {
                for c in 0..dh {
                    assert!((o[(i, c)] - concat[i][h * dh + c]).abs() < 1e-5);
                }
            }
        }
        let proj = matmul(&concat, &w.out_proj);
        let mid: Vec<Vec<f64>> = x.iter().zip(&proj).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
        let hidden: Vec<Vec<f64>> = matmul(&norm_rows(&mid), &w.fc1).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        let mlp = matmul(&hidden, &w.fc2);
        x = mid.iter().zip(&mlp).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
        for (i, r) in x.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                assert!((layer.tokens[(i, j)] - v).abs() < 1e-5, "layer {} token {i} feature {j}", li + 1);
            }
        }
    }
}

#[test]
fn layer_outputs_recomputed_from_trace() {
    for cls in [true, false] {
        let enc = ToyEncoder::new(small(cls)).unwrap();
        let img = synthetic_image(2, 3, 32, 32, 4);
        let trace = enc.forward(&img).unwrap();
        recompute_check(&enc, &img, &trace);
    }
}

#[test]
fn permuted_slots_give_permuted_tokens() {
    let enc = ToyEncoder::new(small(true)).unwrap();
    let img = synthetic_image(1, 0, 32, 32, 9);
    let visible = mask_select(16, 0.5, 21);
    let perm: Vec<usize> = visible.iter().rev().copied().collect();
    let a = enc.forward_visible(&img, &visible).unwrap();
    let b = enc.forward_visible(&img, &perm).unwrap();
    let n = visible.len();
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for j in 0..la.tokens.ncols() {
            assert!((la.tokens[(0, j)] - lb.tokens[(0, j)]).abs() < 1e-5);
            for s in 0..n {
                assert!((la.tokens[(1 + s, j)] - lb.tokens[(1 + n - 1 - s, j)]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn identical_inputs_give_identical_bytes() {
    let img = synthetic_image(0, 1, 32, 32, 6);
    let a = ToyEncoder::new(small(true)).unwrap().forward(&img).unwrap().to_archive().to_bytes().unwrap();
    let b = ToyEncoder::new(small(true)).unwrap().forward(&img).unwrap().to_archive().to_bytes().unwrap();
    assert_eq!(a, b);
}

#[test]
fn head_output_hand_cases() {
    let v = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
    assert_eq!(head_output(&DMatrix::identity(3, 3), &v).unwrap(), v);
    let o = head_output(&DMatrix::from_element(3, 3, 1.0 / 3.0), &v).unwrap();
    for i in 0..3 {
        assert!((o[(i, 0)] - 3.0).abs() < 1e-12 && (o[(i, 1)] - 5.0).abs() < 1e-12);
    }
    assert_eq!(head_output(&DMatrix::identity(3, 3), &DMatrix::zeros(3, 2)).unwrap(), DMatrix::zeros(3, 2));
    assert!(head_output(&DMatrix::identity(2, 2), &v).is_err());
}

#[test]
fn mean_patch_matches_compensated_sum() {
    let mut s = 77u64;
    let mut rnd = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
        (s >> 11) as f64 / (1u64 << 53) as f64 * 2e3 - 1e3
    };
    let tokens = DMatrix::from_fn(50, 64, |_, _| rnd());
    let z = rscope_core::encoder::mean_patch(&tokens, true).unwrap();
    for j in 0..64 {
        let want = compensated_sum((1..50).map(|i| tokens[(i, j)])) / 49.0;
        assert!((z[j] - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
    let two = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(rscope_core::encoder::mean_patch(&two, false).unwrap().as_slice(), &[0.5, 0.5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn attention_rows_are_stochastic(seed in any::<u64>(), ratio in 0.0f64..0.9, cls in any::<bool>()) {
        let cfg = EncoderConfig { seed, mask_seed: seed ^ 1, masking_ratio: ratio, ..small(cls) };
        let t = ToyEncoder::new(cfg).unwrap().forward(&synthetic_image(0, 0, 32, 32, seed)).unwrap();
        let tokens = t.layers[0].tokens.nrows();
        for l in &t.layers {
            prop_assert_eq!(l.tokens.nrows(), tokens);
            for h in &l.heads {
                for r in h.attention.row_iter() {
                    prop_assert!((r.sum() - 1.0).abs() < 1e-6);
                    prop_assert!(r.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }
}
