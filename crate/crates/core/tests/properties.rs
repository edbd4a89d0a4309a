mod common;

use common::{feater_params, max_abs_diff, permute_axis0, random_permutation, vanilla_params};
use feater_core::blocks::{
    attention_h, attention_w, feater_block_forward, feater_block_on, flatten_stack, unflatten_tokens,
    vanilla_block_forward, FeatERBlockParams, FeatureMapStack, TokenMatrix,
};
use feater_core::costmodel::{count_macs_instrumented, macs_feater_block};
use feater_core::reconstruct::{apply_mask, make_mask_plan, reconstruction_loss};
use feater_core::synthtask::{
    decode_argmax_pose, gaussian_heatmap_render, heatmap_mse_loss, l1_pose_loss, HeatmapSpec,
};
use feater_core::tensor::{
    layer_norm, matmul_batched, read_tensor, softmax_lastdim, write_tensor, NormLayout,
};
use feater_core::{RngStream, Tape, Tensor};
use proptest::prelude::*;

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::normal(shape, 1.0, &mut RngStream::new(seed, "properties")).unwrap()
}

fn stack(x: Tensor) -> FeatureMapStack {
    FeatureMapStack::new(x).unwrap()
}

fn feater_dims() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..=2, 1usize..=5, 1usize..=3, 1usize..=3)
        .prop_map(|(heads, n, a, b)| (n, (heads * a).max(2), (heads * b).max(2), heads))
}

proptest! {
    #![proptest_config(cfg(64))]

    #[test]
    fn softmax_is_shift_invariant(rows in 1usize..5, cols in 1usize..9, c in -20.0f64..20.0, seed: u64) {
        let x = randn(&[rows, cols], seed);
        let a = softmax_lastdim(&x).unwrap();
        let b = softmax_lastdim(&x.map(|v| v + c)).unwrap();
        prop_assert!(max_abs_diff(&a, &b) <= 1e-9);
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_by_identity_is_exact(batch in 1usize..4, m in 1usize..7, k in 1usize..7, seed: u64) {
        let a = randn(&[batch, m, k], seed);
        let eye = Tensor::eye(k).unwrap();
        let id = Tensor::from_fn(&[batch, k, k], |i| eye.data()[i % (k * k)]).unwrap();
        prop_assert!(max_abs_diff(&matmul_batched(&a, &id).unwrap(), &a) <= 1e-12);
    }

    #[test]
    fn matmul_matches_summation(m in 1usize..6, k in 1usize..6, p in 1usize..6, seed: u64) {
        let a = randn(&[1, m, k], seed);
        let b = randn(&[1, k, p], seed.wrapping_add(1));
        let c = matmul_batched(&a, &b).unwrap();
        for i in 0..m {
            for j in 0..p {
                let want: f64 = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * p + j]).sum();
                prop_assert!((c.data()[i * p + j] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_standardises_slices(n in 1usize..5, len in 2usize..20, scale in 0.1f64..50.0, shift in -10.0f64..10.0, seed: u64) {
        let x = randn(&[n, len], seed).map(|v| v * scale + shift);
        for layout in [NormLayout::LastAxis, NormLayout::PerChannel] {
            let affine = match layout {
                NormLayout::LastAxis => len,
                NormLayout::PerChannel => n,
            };
            let y = layer_norm(&x, layout, &Tensor::full(&[affine], 1.0).unwrap(), &Tensor::zeros(&[affine]).unwrap(), 1e-5).unwrap();
            for r in 0..n {
                let row = &y.data()[r * len..(r + 1) * len];
                let mean = row.iter().sum::<f64>() / len as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
                prop_assert!(mean.abs() <= 1e-9);
                let raw = &x.data()[r * len..(r + 1) * len];
                let raw_mean = raw.iter().sum::<f64>() / len as f64;
                let raw_var = raw.iter().map(|v| (v - raw_mean).powi(2)).sum::<f64>() / len as f64;
                prop_assert!((var - raw_var / (raw_var + 1e-5)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn tensor_file_round_trips(dims in prop::collection::vec(1usize..5, 0..4), seed: u64) {
        let t = randn(&dims, seed);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        prop_assert_eq!(read_tensor(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn flatten_round_trips(n in 1usize..6, h in 2usize..6, w in 2usize..6, seed: u64) {
        let x = stack(randn(&[n, h, w], seed));
        let tokens = flatten_stack(&x);
        prop_assert_eq!(tokens.tensor().shape(), &[n, h * w]);
        prop_assert_eq!(unflatten_tokens(&tokens, h, w).unwrap(), x);
    }

    #[test]
    fn mask_plan_has_expected_size(n in 2usize..40, ratio in 0.0f64..0.95, seed: u64) {
        let m = (ratio * n as f64).round() as usize;
        let plan = make_mask_plan(n, ratio, &mut RngStream::new(seed, "mask"));
        if m >= n {
            prop_assert!(plan.is_err());
        } else {
            let plan = plan.unwrap();
            prop_assert_eq!(plan.m, m);
            prop_assert_eq!(plan.indices.len(), m);
            prop_assert!(plan.indices.windows(2).all(|p| p[0] < p[1]));
            prop_assert!(plan.indices.iter().all(|&i| i < n));
            let x = stack(randn(&[n, 2, 3], seed));
            let masked = apply_mask(&x, &plan).unwrap();
            for c in 0..n {
                let chan = &masked.tensor().data()[c * 6..(c + 1) * 6];
                if plan.indices.contains(&c) {
                    prop_assert!(chan.iter().all(|&v| v == 0.0));
                } else {
                    prop_assert_eq!(chan, &x.tensor().data()[c * 6..(c + 1) * 6]);
                }
            }
        }
    }

    #[test]
    fn render_then_decode_recovers_integer_joints(
        k in 1usize..5, h in 8usize..24, w in 8usize..24, sigma in 1.0f64..4.0, seed: u64,
    ) {
        let mut rng = RngStream::new(seed, "joints");
        let joints: Vec<[f64; 2]> = (0..k)
            .map(|_| [rng.int_inclusive(0, w as i64 - 1) as f64, rng.int_inclusive(0, h as i64 - 1) as f64])
            .collect();
        let maps = gaussian_heatmap_render(&HeatmapSpec { joints: joints.clone(), sigma, h, w }).unwrap();
        let pose = decode_argmax_pose(&maps);
        prop_assert_eq!(pose.joints, joints);
    }

    #[test]
    fn losses_are_nonnegative_and_match_sums(n in 1usize..5, h in 2usize..6, w in 2usize..6, seed: u64) {
        let a = stack(randn(&[n, h, w], seed));
        let b = stack(randn(&[n, h, w], seed.wrapping_add(7)));
        let count = (n * h * w) as f64;
        let want: f64 = a.tensor().data().iter().zip(b.tensor().data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / count;
        let mse = heatmap_mse_loss(&a, &b).unwrap();
        prop_assert!(mse >= 0.0 && (mse - want).abs() <= 1e-12);
        prop_assert!((reconstruction_loss(&a, &b).unwrap() - want).abs() <= 1e-12);
        prop_assert_eq!(heatmap_mse_loss(&a, &a).unwrap(), 0.0);

        let pa: Vec<[f64; 2]> = a.tensor().data().chunks(2).filter(|c| c.len() == 2).map(|c| [c[0], c[1]]).collect();
        let pb: Vec<[f64; 2]> = b.tensor().data().chunks(2).filter(|c| c.len() == 2).map(|c| [c[0], c[1]]).collect();
        if !pa.is_empty() {
            let want: f64 = pa.iter().zip(&pb).map(|(p, q)| (p[0] - q[0]).abs() + (p[1] - q[1]).abs()).sum::<f64>() / pa.len() as f64;
            let l1 = l1_pose_loss(&pa, &pb).unwrap();
            prop_assert!(l1 >= 0.0);
            prop_assert!((l1 - want).abs() <= 1e-12, "{} vs {}", l1, want);
            prop_assert_eq!(l1_pose_loss(&pa, &pa).unwrap(), 0.0);
        }
    }
}

proptest! {
    #![proptest_config(cfg(24))]

    #[test]
    fn feater_block_structure((n, h, w, heads) in feater_dims(), seed: u64) {
        let mut rng = RngStream::new(seed, "feater");
        let p = feater_params(n, h, w, heads, &mut rng);
        let x = Tensor::normal(&[n, h, w], 1.0, &mut rng).unwrap();
        let out = feater_block_forward(&stack(x.clone()), &p).unwrap();
        prop_assert_eq!(out.tensor().shape(), &[n, h, w]);

        let perm = random_permutation(n, &mut rng);
        let permuted_in = stack(permute_axis0(&x, &perm));
        for (direct, moved) in [
            (attention_w(&stack(x.clone()), &p).unwrap(), attention_w(&permuted_in, &p).unwrap()),
            (attention_h(&stack(x.clone()), &p).unwrap(), attention_h(&permuted_in, &p).unwrap()),
        ] {
            prop_assert!(max_abs_diff(moved.tensor(), &permute_axis0(direct.tensor(), &perm)) <= 1e-10);
        }

        let xt = x.permute(&[0, 2, 1]).unwrap();
        let mirrored = feater_block_forward(&stack(xt), &p.transposed()).unwrap();
        prop_assert!(max_abs_diff(mirrored.tensor(), &out.tensor().permute(&[0, 2, 1]).unwrap()) <= 1e-10);
    }

    #[test]
    fn vanilla_block_is_token_equivariant(n in 1usize..7, dh in 1usize..5, heads in 1usize..3, seed: u64) {
        let d = dh * heads;
        let mut rng = RngStream::new(seed, "vanilla");
        let p = vanilla_params(d, heads, &mut rng);
        let x = Tensor::normal(&[n, d], 1.0, &mut rng).unwrap();
        let perm = random_permutation(n, &mut rng);
        let direct = vanilla_block_forward(&TokenMatrix::new(x.clone()).unwrap(), &p).unwrap();
        let moved = vanilla_block_forward(&TokenMatrix::new(permute_axis0(&x, &perm)).unwrap(), &p).unwrap();
        prop_assert_eq!(direct.tensor().shape(), &[n, d]);
        prop_assert!(max_abs_diff(moved.tensor(), &permute_axis0(direct.tensor(), &perm)) <= 1e-10);
    }

    #[test]
    fn instrumented_macs_equal_analytical(n in 1usize..6, h in 1usize..7, w in 1usize..7, seed: u64) {
        let mut rng = RngStream::new(seed, "macs");
        let x = Tensor::uniform(&[n, h, w], -1.0, 1.0, &mut rng).unwrap();
        let mut tape = Tape::with_mac_counting();
        let xv = tape.leaf(x);
        let p = FeatERBlockParams::init(n, h, w, 1, &mut rng).unwrap().into_registered(&mut tape);
        feater_block_on(&mut tape, xv, &p).unwrap();
        let got = count_macs_instrumented(&tape).unwrap();
        let want = macs_feater_block(n, h, w).unwrap();
        prop_assert_eq!(got.total_macs(), want.total_macs());
        for row in want.rows() {
            prop_assert_eq!(got.row(&row.label).map(|r| r.macs), Some(row.macs), "{}", row.label);
        }
    }
}
