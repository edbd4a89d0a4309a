#![allow(dead_code)]

pub mod oracle;

use feater_core::blocks::{FeatERBlockParams, ParamKind, VanillaBlockParams};
use feater_core::{RngStream, Tensor};

/// Seeded init with every norm and bias entry moved off its default so
/// that all paths of the block carry signal.
pub fn feater_params(n: usize, h: usize, w: usize, heads: usize, rng: &mut RngStream) -> FeatERBlockParams {
    let mut p = FeatERBlockParams::init(n, h, w, heads, rng).unwrap();
    let kinds: Vec<ParamKind> = p.named().into_iter().map(|(_, k, _)| k).collect();
    for ((_, t), kind) in p.named_mut().into_iter().zip(kinds) {
        if kind != ParamKind::Weight {
            *t = t.add(&Tensor::uniform(t.shape(), -0.5, 0.5, rng).unwrap()).unwrap();
        }
    }
    p
}

pub fn vanilla_params(d: usize, heads: usize, rng: &mut RngStream) -> VanillaBlockParams {
    let mut p = VanillaBlockParams::init(d, heads, rng).unwrap();
    let kinds: Vec<ParamKind> = p.named().into_iter().map(|(_, k, _)| k).collect();
    for ((_, t), kind) in p.named_mut().into_iter().zip(kinds) {
        if kind != ParamKind::Weight {
            *t = t.add(&Tensor::uniform(t.shape(), -0.5, 0.5, rng).unwrap()).unwrap();
        }
    }
    p
}

/// Small random extents: `heads` divides both `h` and `w`.
pub fn feater_dims(rng: &mut RngStream) -> (usize, usize, usize, usize) {
    let heads = rng.int_inclusive(1, 2) as usize;
    let n = rng.int_inclusive(1, 6) as usize;
    let h = heads * rng.int_inclusive(1, 4) as usize + if heads == 1 { 1 } else { 0 };
    let w = heads * rng.int_inclusive(1, 4) as usize + if heads == 1 { 1 } else { 0 };
    (n, h.max(2), w.max(2), heads)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Reorders axis 0 of `[n, ...]`: output channel `i` is input channel `perm[i]`.
pub fn permute_axis0(x: &Tensor, perm: &[usize]) -> Tensor {
    let per = x.len() / x.shape()[0];
    let data = perm.iter().flat_map(|&p| x.data()[p * per..(p + 1) * per].iter().copied()).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

pub fn random_permutation(n: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.int_inclusive(0, i as i64) as usize;
        p.swap(i, j);
    }
    p
}
