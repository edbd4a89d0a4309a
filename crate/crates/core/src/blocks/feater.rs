//! FeatER block over intact `[n, h, w]` feature maps.
//!
//! Attention runs across the `n` channels twice: once with each row's
//! width-`w` values as token features (batched over the `h` rows) and once
//! with each column's height-`h` values as features (batched over the `w`
//! columns, via an `h ↔ w` transpose).
//!
//! ```text
//! y   = LN1(x)                               per-channel norm over (h, w)
//! a   = Proj(attention_w(y) + attention_h(y))        1×1 conv n → n
//! u   = x + a
//! out = u + FFN(LN2(u))                      FFN = conv n → 2n → GELU → conv 2n → n
//! ```

use super::params::{FeatERBlockParams, FeatERBlockVars};
use super::{labels, multi_head_attention, FeatureMapStack};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{NormLayout, Tensor, DEFAULT_LAYER_NORM_EPS};

fn check_input(tape: &Tape, x: Var, p: &FeatERBlockVars) -> Result<()> {
    let xs = tape.value(x).shape();
    let n = tape.value(p.proj_weight).shape()[0];
    let h = tape.value(p.w_q_h).shape()[0];
    let w = tape.value(p.w_q_w).shape()[0];
    if xs != [n, h, w] {
        return Err(Error::dim(format!(
            "feature maps {xs:?} do not match block parameters for [{n}, {h}, {w}]"
        )));
    }
    Ok(())
}

/// Attention across channels with the last axis as token features, batched
/// over the middle axis. `x` is `[n, rows, features]`.
#[allow(clippy::too_many_arguments)]
fn channel_attention(
    tape: &mut Tape,
    x: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    heads: usize,
    qkv_label: &str,
    logits_label: &str,
    sum_label: &str,
) -> Result<(Var, Var)> {
    tape.set_label(qkv_label);
    let q = tape.linear(x, w_q, None)?;
    let k = tape.linear(x, w_k, None)?;
    let v = tape.linear(x, w_v, None)?;
    // [n, rows, f] → [rows, n, f]: rows become the batch
    let q = tape.permute(q, &[1, 0, 2])?;
    let k = tape.permute(k, &[1, 0, 2])?;
    let v = tape.permute(v, &[1, 0, 2])?;
    let (out, probs) = multi_head_attention(tape, q, k, v, heads, logits_label, sum_label)?;
    Ok((tape.permute(out, &[1, 0, 2])?, probs))
}

fn attention_w_parts(tape: &mut Tape, x: Var, p: &FeatERBlockVars) -> Result<(Var, Var)> {
    channel_attention(
        tape,
        x,
        p.w_q_w,
        p.w_k_w,
        p.w_v_w,
        p.heads,
        labels::W_QKV,
        labels::W_LOGITS,
        labels::W_WEIGHTED_SUM,
    )
}

fn attention_h_parts(tape: &mut Tape, x: Var, p: &FeatERBlockVars) -> Result<(Var, Var)> {
    let xt = tape.permute(x, &[0, 2, 1])?;
    let (out, probs) = channel_attention(
        tape,
        xt,
        p.w_q_h,
        p.w_k_h,
        p.w_v_h,
        p.heads,
        labels::H_QKV,
        labels::H_LOGITS,
        labels::H_WEIGHTED_SUM,
    )?;
    Ok((tape.permute(out, &[0, 2, 1])?, probs))
}

/// Width-stream attention; output `[n, h, w]`.
pub fn attention_w_on(tape: &mut Tape, x: Var, p: &FeatERBlockVars) -> Result<Var> {
    check_input(tape, x, p)?;
    attention_w_parts(tape, x, p).map(|(out, _)| out)
}

/// Height-stream attention; output `[n, h, w]`.
pub fn attention_h_on(tape: &mut Tape, x: Var, p: &FeatERBlockVars) -> Result<Var> {
    check_input(tape, x, p)?;
    attention_h_parts(tape, x, p).map(|(out, _)| out)
}

pub fn feater_ffn_on(tape: &mut Tape, x: Var, p: &FeatERBlockVars) -> Result<Var> {
    tape.set_label(labels::FFN_EXPAND);
    let hidden = tape.conv1x1(x, p.ffn1_weight, p.ffn1_bias)?;
    let hidden = tape.gelu(hidden);
    tape.set_label(labels::FFN_CONTRACT);
    tape.conv1x1(hidden, p.ffn2_weight, p.ffn2_bias)
}

pub fn feater_block_on(tape: &mut Tape, x: Var, p: &FeatERBlockVars) -> Result<Var> {
    check_input(tape, x, p)?;
    let y = tape.layer_norm(x, p.ln1_gain, p.ln1_bias, NormLayout::PerChannel, DEFAULT_LAYER_NORM_EPS)?;
    let (aw, _) = attention_w_parts(tape, y, p)?;
    let (ah, _) = attention_h_parts(tape, y, p)?;
    let a = tape.add(aw, ah)?;
    tape.set_label(labels::PROJECTION);
    let a = tape.conv1x1(a, p.proj_weight, p.proj_bias)?;
    let u = tape.add(a, x)?;
    let y = tape.layer_norm(u, p.ln2_gain, p.ln2_bias, NormLayout::PerChannel, DEFAULT_LAYER_NORM_EPS)?;
    let f = feater_ffn_on(tape, y, p)?;
    tape.add(f, u)
}

fn with_tape<T>(
    x: &FeatureMapStack,
    p: &FeatERBlockParams,
    f: impl FnOnce(&mut Tape, Var, &FeatERBlockVars) -> Result<T>,
) -> Result<T> {
    p.validate()?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.tensor().clone());
    let vars = p.register(&mut tape);
    f(&mut tape, xv, &vars)
}

fn map_output(
    x: &FeatureMapStack,
    p: &FeatERBlockParams,
    f: fn(&mut Tape, Var, &FeatERBlockVars) -> Result<Var>,
) -> Result<FeatureMapStack> {
    with_tape(x, p, |tape, xv, vars| {
        let out = f(tape, xv, vars)?;
        FeatureMapStack::new(tape.value(out).clone())
    })
}

pub fn attention_w(x: &FeatureMapStack, p: &FeatERBlockParams) -> Result<FeatureMapStack> {
    map_output(x, p, attention_w_on)
}

pub fn attention_h(x: &FeatureMapStack, p: &FeatERBlockParams) -> Result<FeatureMapStack> {
    map_output(x, p, attention_h_on)
}

pub fn feater_ffn(x: &FeatureMapStack, p: &FeatERBlockParams) -> Result<FeatureMapStack> {
    map_output(x, p, |tape, xv, vars| {
        if tape.value(xv).shape()[0] != tape.value(vars.ffn1_weight).shape()[1] {
            return Err(Error::dim(format!(
                "{} channels do not match FFN input width {}",
                tape.value(xv).shape()[0],
                tape.value(vars.ffn1_weight).shape()[1]
            )));
        }
        feater_ffn_on(tape, xv, vars)
    })
}

pub fn feater_block_forward(x: &FeatureMapStack, p: &FeatERBlockParams) -> Result<FeatureMapStack> {
    map_output(x, p, feater_block_on)
}

/// Width-stream attention weights, `[h·heads, n, n]`; each row sums to 1.
pub fn attention_w_probs(x: &FeatureMapStack, p: &FeatERBlockParams) -> Result<Tensor> {
    with_tape(x, p, |tape, xv, vars| {
        check_input(tape, xv, vars)?;
        let (_, probs) = attention_w_parts(tape, xv, vars)?;
        Ok(tape.value(probs).clone())
    })
}

/// Height-stream attention weights, `[w·heads, n, n]`.
pub fn attention_h_probs(x: &FeatureMapStack, p: &FeatERBlockParams) -> Result<Tensor> {
    with_tape(x, p, |tape, xv, vars| {
        check_input(tape, xv, vars)?;
        let (_, probs) = attention_h_parts(tape, xv, vars)?;
        Ok(tape.value(probs).clone())
    })
}
