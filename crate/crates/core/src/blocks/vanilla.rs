//! Pre-norm transformer block over flattened `[n, d]` tokens:
//!
//! ```text
//! u   = x + MSA(LN1(x))
//! out = u + MLP(LN2(u))        MLP = Linear(d, 2d) → GELU → Linear(2d, d)
//! ```

use super::params::{VanillaBlockParams, VanillaBlockVars};
use super::{labels, multi_head_attention, TokenMatrix};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{NormLayout, DEFAULT_LAYER_NORM_EPS};

fn check_input(tape: &Tape, x: Var, p: &VanillaBlockVars) -> Result<(usize, usize)> {
    let (xs, d) = (tape.value(x).shape(), tape.value(p.w_q).shape()[0]);
    match xs {
        &[n, dx] if dx == d => Ok((n, d)),
        _ => Err(Error::dim(format!(
            "token matrix {xs:?} does not match block dimension {d}"
        ))),
    }
}

/// Multi-head self-attention with output projection.
pub fn vanilla_msa_on(tape: &mut Tape, x: Var, p: &VanillaBlockVars) -> Result<Var> {
    let (n, d) = check_input(tape, x, p)?;
    tape.set_label(labels::QKV);
    let q = tape.linear(x, p.w_q, None)?;
    let k = tape.linear(x, p.w_k, None)?;
    let v = tape.linear(x, p.w_v, None)?;
    let as_batch = |tape: &mut Tape, t: Var| tape.reshape(t, &[1, n, d]);
    let (q, k, v) = (as_batch(tape, q)?, as_batch(tape, k)?, as_batch(tape, v)?);
    let (attended, _) =
        multi_head_attention(tape, q, k, v, p.heads, labels::LOGITS, labels::WEIGHTED_SUM)?;
    let attended = tape.reshape(attended, &[n, d])?;
    tape.set_label(labels::PROJECTION);
    tape.linear(attended, p.proj_weight, Some(p.proj_bias))
}

pub fn vanilla_block_on(tape: &mut Tape, x: Var, p: &VanillaBlockVars) -> Result<Var> {
    check_input(tape, x, p)?;
    let normed = tape.layer_norm(x, p.ln1_gain, p.ln1_bias, NormLayout::LastAxis, DEFAULT_LAYER_NORM_EPS)?;
    let attn = vanilla_msa_on(tape, normed, p)?;
    let u = tape.add(x, attn)?;
    let normed = tape.layer_norm(u, p.ln2_gain, p.ln2_bias, NormLayout::LastAxis, DEFAULT_LAYER_NORM_EPS)?;
    tape.set_label(labels::MLP_EXPAND);
    let hidden = tape.linear(normed, p.mlp1_weight, Some(p.mlp1_bias))?;
    let hidden = tape.gelu(hidden);
    tape.set_label(labels::MLP_CONTRACT);
    let mlp = tape.linear(hidden, p.mlp2_weight, Some(p.mlp2_bias))?;
    tape.add(u, mlp)
}

fn run(
    x: &TokenMatrix,
    p: &VanillaBlockParams,
    f: fn(&mut Tape, Var, &VanillaBlockVars) -> Result<Var>,
) -> Result<TokenMatrix> {
    p.validate()?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.tensor().clone());
    let vars = p.register(&mut tape);
    let out = f(&mut tape, xv, &vars)?;
    TokenMatrix::new(tape.value(out).clone())
}

pub fn vanilla_msa(x: &TokenMatrix, p: &VanillaBlockParams) -> Result<TokenMatrix> {
    run(x, p, vanilla_msa_on)
}

pub fn vanilla_block_forward(x: &TokenMatrix, p: &VanillaBlockParams) -> Result<TokenMatrix> {
    run(x, p, vanilla_block_on)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tensor::Tensor;

    fn tokens(n: usize, d: usize, seed: u64) -> TokenMatrix {
        let mut rng = RngStream::new(seed, "vanilla-test");
        TokenMatrix::new(Tensor::normal(&[n, d], 1.0, &mut rng).unwrap()).unwrap()
    }

    #[test]
    fn uniform_attention_averages_tokens() {
        let (n, d) = (5, 6);
        let x = tokens(n, d, 1);
        let mut p = VanillaBlockParams::zeros(d, 1).unwrap();
        p.w_v = Tensor::eye(d).unwrap();
        p.proj_weight = Tensor::eye(d).unwrap();
        let out = vanilla_msa(&x, &p).unwrap();
        for j in 0..d {
            let mean: f64 = (0..n).map(|i| x.tensor().get(&[i, j]).unwrap()).sum::<f64>() / n as f64;
            for i in 0..n {
                assert!((out.tensor().get(&[i, j]).unwrap() - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_is_value_then_projection() {
        let mut rng = RngStream::new(2, "vanilla-test");
        let p = VanillaBlockParams::init(4, 2, &mut rng).unwrap();
        let x = tokens(1, 4, 3);
        let out = vanilla_msa(&x, &p).unwrap();
        let expect = crate::tensor::matmul_batched(
            &crate::tensor::matmul_batched(x.tensor(), &p.w_v).unwrap(),
            &p.proj_weight,
        )
        .unwrap();
        assert!(out.tensor().max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn residual_only_block_is_identity() {
        let mut rng = RngStream::new(4, "vanilla-test");
        let mut p = VanillaBlockParams::init(8, 2, &mut rng).unwrap();
        for name in ["w_v", "mlp1_weight", "mlp2_weight", "proj_bias", "mlp1_bias", "mlp2_bias"] {
            let (_, t) = p.named_mut().into_iter().find(|(n, _)| *n == name).unwrap();
            t.data_mut().fill(0.0);
        }
        let x = tokens(3, 8, 5);
        assert_eq!(vanilla_block_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = VanillaBlockParams::zeros(4, 1).unwrap();
        assert!(matches!(
            vanilla_block_forward(&tokens(2, 5, 0), &p),
            Err(Error::Dimension(_))
        ));
    }
}
